"""InfoMEC: information-theoretic modularity, explicitness and compactness.

Pipeline::

    sources (N, n_s) ints, latents (N, n_z) reals
        -> NMI[i, j] = I(s_i; z_j) / H(s_i)              (nmi_matrix)
        -> drop latents whose range < 1/8 of the widest  (prune_inactive)
        -> InfoM from column max/sum ratios               (infom)
        -> InfoC from row max/sum ratios                  (infoc)
        -> InfoE from unregularised multinomial probes    (infoe)

Mutual information uses the plug-in estimator when latents are discrete
and the discrete-continuous nearest-neighbour estimator otherwise. All
quantities are in nats.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import digamma

DISCRETE = "discrete"
CONTINUOUS = "continuous"
DEFAULT_K = 3
INACTIVE_FRACTION = 1 / 8


class EstimatorWarning(RuntimeWarning):
    """An estimator hit a degenerate case and applied its documented fallback."""


class ConstantSourceError(ValueError):
    """A source column has zero entropy, so NMI and explicitness are undefined for it."""


@dataclass
class EvalSample:
    sources: np.ndarray  # (N, n_s) integers
    latents: np.ndarray  # (N, n_z) reals
    latent_kind: str = CONTINUOUS
    source_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.sources = np.asarray(self.sources)
        self.latents = np.asarray(self.latents, dtype=np.float64)
        if self.latents.ndim == 1:
            self.latents = self.latents[:, None]
        if self.sources.ndim == 1:
            self.sources = self.sources[:, None]
        if self.latent_kind not in (DISCRETE, CONTINUOUS):
            raise ValueError(f"latent_kind must be {DISCRETE!r} or {CONTINUOUS!r}")
        if len(self.sources) != len(self.latents):
            raise ValueError("sources and latents have different row counts")
        if len(self.sources) < 2:
            raise ValueError("need at least 2 samples")
        if not self.source_names:
            self.source_names = tuple(f"source-{i}" for i in range(self.n_sources))

    @property
    def n_sources(self) -> int:
        return self.sources.shape[1]

    @property
    def n_latents(self) -> int:
        return self.latents.shape[1]


@dataclass
class NmiReport:
    nmi: np.ndarray  # (n_s, n_z), all latents
    active_mask: np.ndarray  # (n_z,)

    @property
    def n_active(self) -> int:
        return int(self.active_mask.sum())

    @property
    def active(self) -> np.ndarray:
        return self.nmi[:, self.active_mask]


@dataclass
class InfoMecResult:
    infom: float
    infoe: float
    infoc: float
    per_latent_ratios: np.ndarray  # length n_active
    per_source_ratios: np.ndarray  # length n_s
    per_source_explicitness: np.ndarray  # length n_s
    report: NmiReport | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {"infom": self.infom, "infoe": self.infoe, "infoc": self.infoc}


# --- entropy and plug-in MI ----------------------------------------------------


def _codes(col) -> np.ndarray:
    """Relabel a column's distinct values as 0..K-1."""
    return np.unique(np.asarray(col), return_inverse=True)[1].ravel()


def entropy_discrete(col) -> float:
    """Plug-in entropy of the empirical distribution of ``col``."""
    counts = np.unique(np.asarray(col), return_counts=True)[1]
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def discrete_mi(a_col, b_col) -> float:
    """Plug-in mutual information from the empirical contingency table."""
    a, b = _codes(a_col), _codes(b_col)
    if len(a) != len(b):
        raise ValueError("columns differ in length")
    n = len(a)
    nb = b.max() + 1
    joint = np.bincount(a * nb + b, minlength=(a.max() + 1) * nb).reshape(-1, nb)
    ca = joint.sum(axis=1, keepdims=True)
    cb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    # Integer numerator and denominator keep exactly independent cells at log(1) = 0.
    num = (joint * n)[nz].astype(np.float64)
    den = (ca * cb)[nz].astype(np.float64)
    # fsum is exactly rounded, hence independent of cell order and symmetric in (a, b)
    mi = math.fsum(joint[nz] / n * np.log(num / den))
    return max(mi, 0.0)


# --- discrete-continuous nearest-neighbour MI ----------------------------------


def _kth_same_class_distance(values: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest other point (1-D, one class)."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    n = len(v)
    padded = np.concatenate([np.full(k, np.inf), v, np.full(k, np.inf)])
    idx = np.arange(n)[:, None] + k + np.concatenate([np.arange(-k, 0), np.arange(1, k + 1)])[None, :]
    # The k nearest neighbours of a point in sorted 1-D data lie within k slots.
    dist = np.abs(padded[idx] - v[:, None])
    kth = np.partition(dist, k - 1, axis=1)[:, k - 1]
    out = np.empty(n)
    out[order] = kth
    return out


def _count_strictly_within(sorted_all: np.ndarray, centers: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """``#{m : |sorted_all[m] - c| < r}`` for each centre, exact at the boundaries."""
    n = len(sorted_all)
    lo = np.searchsorted(sorted_all, centers - radius, side="left")
    hi = np.searchsorted(sorted_all, centers + radius, side="right")
    # searchsorted bounds come from rounded sums; nudge them until the exact
    # distance test holds on both sides.
    for _ in range(n):
        moved = False
        inside = lo < n
        grow = (lo > 0) & (np.abs(sorted_all[np.maximum(lo - 1, 0)] - centers) < radius)
        shrink = inside & (lo < hi) & ~(np.abs(sorted_all[np.minimum(lo, n - 1)] - centers) < radius)
        if grow.any() or shrink.any():
            lo = lo - grow + shrink
            moved = True
        grow = (hi < n) & (np.abs(sorted_all[np.minimum(hi, n - 1)] - centers) < radius)
        shrink = (hi > lo) & ~(np.abs(sorted_all[np.maximum(hi - 1, 0)] - centers) < radius)
        if grow.any() or shrink.any():
            hi = hi + grow - shrink
            moved = True
        if not moved:
            break
    return hi - lo


def ksg_mi_dc(s_col, z_col, k: int = DEFAULT_K) -> float:
    """Nearest-neighbour MI between a discrete ``s_col`` and a continuous ``z_col``.

    For each sample ``i`` with discrete value ``s_i``: ``d_i`` is the distance
    to its k-th nearest neighbour among samples sharing ``s_i``; ``m_i`` counts
    samples of any class (``i`` included) strictly closer than ``d_i``. The
    estimate is the mean of ``psi(N) - psi(N_{s_i}) + psi(k) - psi(m_i)``,
    clamped at 0.

    When ``d_i == 0`` (the k-th neighbour is an exact duplicate) the strict ball
    is empty; following the estimator for discrete-continuous mixtures, ``k``
    and ``m_i`` are then replaced by the number of same-class and any-class
    samples that coincide with ``z_i`` (``i`` included). Samples whose class
    has at most ``k`` members are dropped with an :class:`EstimatorWarning`.
    """
    s = _codes(s_col)
    z = np.asarray(z_col, dtype=np.float64).ravel()
    if len(s) != len(z):
        raise ValueError("columns differ in length")
    if k < 1 or k >= len(z):
        raise ValueError(f"k must satisfy 1 <= k < N, got k={k}, N={len(z)}")
    if not np.all(np.isfinite(z)):
        raise ValueError("continuous column contains non-finite values")
    if np.all(z == z[0]):
        warnings.warn("constant continuous column carries no information; returning 0", EstimatorWarning)
        return 0.0

    class_sizes = np.bincount(s)
    keep = class_sizes[s] > k
    if not keep.all():
        warnings.warn(
            f"skipped {int((~keep).sum())} samples whose class has <= {k} members", EstimatorWarning
        )
        s, z = _codes(s[keep]), z[keep]
        class_sizes = np.bincount(s)
    n = len(z)
    if n <= k + 1:
        warnings.warn("too few usable samples; returning 0", EstimatorWarning)
        return 0.0

    d = np.empty(n)
    for c in range(len(class_sizes)):
        members = s == c
        d[members] = _kth_same_class_distance(z[members], k)

    sorted_all = np.sort(z)
    m = _count_strictly_within(sorted_all, z, d)
    k_i = np.full(n, float(k))

    tied = d == 0
    if tied.any():
        # coincident-value counts, overall and within the class
        values, inverse, counts = np.unique(z, return_inverse=True, return_counts=True)
        m[tied] = counts[inverse[tied]]
        joint = inverse * len(class_sizes) + s
        _, jinv, jcounts = np.unique(joint, return_inverse=True, return_counts=True)
        k_i[tied] = jcounts[jinv[tied]]

    est = digamma(n) - digamma(class_sizes[s]).mean() + (digamma(k_i) - digamma(m)).mean()
    return max(float(est), 0.0)


# --- pruning, NMI, InfoM / InfoC -----------------------------------------------


def prune_inactive(latents) -> np.ndarray:
    """Active-latent mask: range at least 1/8 of the widest latent's range."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim == 1:
        latents = latents[:, None]
    ranges = latents.max(axis=0) - latents.min(axis=0)
    top = ranges.max() if ranges.size else 0.0
    if top <= 0:
        return np.zeros(latents.shape[1], dtype=bool)
    return ranges >= top * INACTIVE_FRACTION


def _source_entropies(sample: EvalSample) -> np.ndarray:
    h = np.array([entropy_discrete(sample.sources[:, i]) for i in range(sample.n_sources)])
    for i, hi in enumerate(h):
        if hi <= 0:
            raise ConstantSourceError(
                f"source {sample.source_names[i]!r} is constant in the sample; it cannot be evaluated"
            )
    return h


def nmi_matrix(sample: EvalSample, k: int = DEFAULT_K) -> NmiReport:
    h = _source_entropies(sample)
    nmi = np.zeros((sample.n_sources, sample.n_latents))
    for j in range(sample.n_latents):
        z = sample.latents[:, j]
        for i in range(sample.n_sources):
            s = sample.sources[:, i]
            mi = discrete_mi(s, z) if sample.latent_kind == DISCRETE else ksg_mi_dc(s, z, k)
            nmi[i, j] = mi / h[i]
    return NmiReport(np.clip(nmi, 0.0, 1.0), prune_inactive(sample.latents))


def _max_to_sum(m: np.ndarray, axis: int, fallback: float) -> np.ndarray:
    sums = m.sum(axis=axis)
    maxes = m.max(axis=axis)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(sums > 0, maxes / np.where(sums > 0, sums, 1), fallback)
    return ratio


def latent_ratios(report: NmiReport) -> np.ndarray:
    """Per active latent: largest NMI entry over the column sum (1/n_s if the column is zero)."""
    n_s = report.nmi.shape[0]
    return _max_to_sum(report.active, axis=0, fallback=1.0 / n_s)


def source_ratios(report: NmiReport) -> np.ndarray:
    n_a = report.n_active
    return _max_to_sum(report.active, axis=1, fallback=1.0 / max(n_a, 1))


def infom(report: NmiReport) -> float:
    """Modularity: mean column concentration of NMI, rescaled from [1/n_s, 1] to [0, 1]."""
    n_s = report.nmi.shape[0]
    if report.n_active < 1:
        raise ValueError("no active latents")
    if n_s < 2:
        raise ValueError("modularity needs at least 2 sources")
    r = latent_ratios(report).mean()
    return float(np.clip((r - 1 / n_s) / (1 - 1 / n_s), 0.0, 1.0))


def infoc(report: NmiReport) -> float:
    """Compactness: mean row concentration of NMI over active latents, rescaled to [0, 1]."""
    n_a = report.n_active
    if n_a < 1:
        raise ValueError("no active latents")
    if n_a == 1:
        warnings.warn("single active latent: compactness is trivially 1", EstimatorWarning)
        return 1.0
    r = source_ratios(report).mean()
    return float(np.clip((r - 1 / n_a) / (1 - 1 / n_a), 0.0, 1.0))


# --- explicitness ---------------------------------------------------------------


PROBE_TOL = 1e-6
PROBE_MAX_ITER = 10_000


@dataclass
class Probe:
    weights: np.ndarray  # (d + 1, K) on standardised features, last row is the intercept
    classes: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    iterations: int
    grad_norm: float

    def logits(self, latents) -> np.ndarray:
        x = (np.asarray(latents, np.float64) - self.mean) / self.scale
        return np.hstack([x, np.ones((len(x), 1))]) @ self.weights


def _probe_loss_grad(w, x, y_onehot, weights):
    logits = x @ w
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    z = e.sum(axis=1, keepdims=True)
    logp_true = (logits * y_onehot).sum(axis=1) - np.log(z[:, 0])
    loss = -(weights @ logp_true)
    grad = x.T @ ((e / z - y_onehot) * weights[:, None])
    return float(loss), grad


PROBE_MEMORY = 10


def fit_probe(latents, s_col, tol: float = PROBE_TOL, max_iter: int = PROBE_MAX_ITER) -> tuple[Probe, float]:
    """Unregularised multinomial logistic regression of ``s_col`` on ``latents``.

    Returns the probe and its mean in-sample negative log-likelihood (nats).

    Features are standardised (an invertible affine map, so the attainable
    likelihood is unchanged) and duplicate ``(latent row, label)`` pairs are
    merged with multiplicity weights, which leaves the objective identical.
    Optimisation is full-batch gradient descent. The step length is the
    Barzilai-Borwein estimate from the previous two iterates, halved until a
    non-monotone Armijo condition holds (c = 1e-4 against the largest of the
    last 10 losses). It stops when the gradient norm drops below ``tol`` or
    after ``max_iter`` iterations; under perfect separation the loss keeps
    falling toward 0 and the value at the cap is returned. The reported NLL is
    the lowest loss visited.
    """
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    classes, y = np.unique(np.asarray(s_col), return_inverse=True)
    y = y.ravel()
    n = len(y)
    mean = z.mean(axis=0)
    scale = z.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    feats = (z - mean) / scale
    rows, counts = np.unique(
        np.hstack([feats, y[:, None].astype(np.float64)]), axis=0, return_counts=True
    )
    x = np.hstack([rows[:, :-1], np.ones((len(rows), 1))])
    yr = rows[:, -1].astype(int)
    n_classes = len(classes)
    onehot = np.eye(n_classes)[yr]
    wts = counts / n

    w = np.zeros((x.shape[1], n_classes))
    loss, grad = _probe_loss_grad(w, x, onehot, wts)
    best_w, best_loss = w, loss
    history = [loss]
    step = 1.0
    prev_w = prev_g = None
    it = 0
    gnorm = float(np.linalg.norm(grad))
    while it < max_iter and gnorm > tol:
        if prev_w is not None:
            sw, sg = (w - prev_w).ravel(), (grad - prev_g).ravel()
            curv = sw @ sg
            if curv > 0:
                step = (sw @ sw) / curv
        ref = max(history[-PROBE_MEMORY:])
        g2 = gnorm**2
        while True:
            cand = w - step * grad
            new_loss, new_grad = _probe_loss_grad(cand, x, onehot, wts)
            if new_loss <= ref - 1e-4 * step * g2 or step < 1e-12:
                break
            step *= 0.5
        prev_w, prev_g = w, grad
        w, loss, grad = cand, new_loss, new_grad
        history.append(loss)
        if loss < best_loss:
            best_w, best_loss = w, loss
        gnorm = float(np.linalg.norm(grad))
        it += 1
    if gnorm > tol:
        w, loss = best_w, best_loss
        gnorm = float(np.linalg.norm(_probe_loss_grad(w, x, onehot, wts)[1]))
    if n_classes == 1:
        loss = 0.0
    return Probe(w, classes, mean, scale, it, gnorm), float(loss)


def v_entropy_marginal(s_col) -> float:
    """Best constant-input predictor's NLL, which is the plug-in entropy.

    A constant input leaves the model a free categorical distribution whose
    in-sample NLL is minimised by the empirical frequencies.
    """
    return entropy_discrete(s_col)


def linear_explicitness(latents, target) -> float:
    """Normalised predictive information for a continuous target: OLS R^2."""
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    t = np.asarray(target, dtype=np.float64).ravel()
    x = np.hstack([z, np.ones((len(z), 1))])
    coef, *_ = np.linalg.lstsq(x, t, rcond=None)
    resid = t - x @ coef
    total_ss = ((t - t.mean()) ** 2).sum()
    if total_ss == 0:
        raise ConstantSourceError("target is constant")
    return float(np.clip(1 - (resid**2).sum() / total_ss, 0.0, 1.0))


def infoe_detail(sample: EvalSample, active_mask: np.ndarray | None = None) -> np.ndarray:
    """Per-source normalised V-information using all active latents."""
    if active_mask is None:
        active_mask = prune_inactive(sample.latents)
    if not active_mask.any():
        raise ValueError("no active latents")
    z = sample.latents[:, active_mask]
    h = _source_entropies(sample)
    out = np.empty(sample.n_sources)
    for i in range(sample.n_sources):
        _, nll = fit_probe(z, sample.sources[:, i])
        out[i] = np.clip((h[i] - nll) / h[i], 0.0, 1.0)
    return out


def infoe(sample: EvalSample, active_mask: np.ndarray | None = None) -> float:
    """Explicitness: mean over sources of the relative V-entropy reduction."""
    return float(infoe_detail(sample, active_mask).mean())


def infomec(sample: EvalSample, k: int = DEFAULT_K) -> InfoMecResult:
    report = nmi_matrix(sample, k)
    per_source_e = infoe_detail(sample, report.active_mask)
    return InfoMecResult(
        infom=infom(report),
        infoe=float(per_source_e.mean()),
        infoc=infoc(report),
        per_latent_ratios=latent_ratios(report),
        per_source_ratios=source_ratios(report),
        per_source_explicitness=per_source_e,
        report=report,
    )


# --- EvalSample files -------------------------------------------------------------
#
# meta.json    {n_s, n_z, count, latent_kind}
# sources.u8   count x n_s bytes, row-major
# latents.f32  count x n_z little-endian float32, row-major


def save_eval_sample(sample: EvalSample, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "n_s": sample.n_sources,
        "n_z": sample.n_latents,
        "count": len(sample.sources),
        "latent_kind": sample.latent_kind,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    np.ascontiguousarray(sample.sources, dtype=np.uint8).tofile(directory / "sources.u8")
    np.ascontiguousarray(sample.latents, dtype="<f4").tofile(directory / "latents.f32")
    return directory


def load_eval_sample(directory) -> EvalSample:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    for key in ("n_s", "n_z", "count", "latent_kind"):
        if key not in meta:
            raise ValueError(f"meta.json missing {key!r}")
    n, n_s, n_z = meta["count"], meta["n_s"], meta["n_z"]
    sources = np.fromfile(directory / "sources.u8", dtype=np.uint8)
    latents = np.fromfile(directory / "latents.f32", dtype="<f4")
    if sources.size != n * n_s or latents.size != n * n_z:
        raise ValueError("payload sizes disagree with meta.json")
    return EvalSample(sources.reshape(n, n_s), latents.reshape(n, n_z).astype(np.float64), meta["latent_kind"])
