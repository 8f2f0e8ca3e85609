"""Margin-based lower bounds on the L2 robustness radius of a late-fusion model.

For a target ``y`` and competitor ``j`` with per-modality margins ``xi`` and
per-modality Lipschitz constants ``tau`` of those margins, any perturbation
that equalizes the fused logits has norm at least::

    sum_m w_m xi_m / sqrt(sum_m (w_m tau_m)^2)

The certificate for a sample is the minimum of this over ``j != y``. It is
only as good as ``tau``: with ``tau`` from :func:`exact_lipschitz` (linear
encoders) it is a proof; with :func:`estimate_lipschitz` it is an empirical
estimate and is labelled so.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from mnl.model import FusionSpec, backward, encoder_forward, forward
from mnl.numerics import RngStream

SHRINK = 1e-6


@dataclass
class LipschitzEstimate:
    tau: np.ndarray  # (M, C, C), entry [m, y, j]
    method: str  # "exact-linear" or "sampled"
    K: int | None = None
    r: float | None = None

    @property
    def certified(self) -> bool:
        return self.method == "exact-linear"


@dataclass
class CertificationResult:
    sample_id: int
    correct: bool
    certifiable: bool
    y: int
    j: int | None = None
    R_lb: float | None = None
    R_exact: float | None = None
    R_attack: float | None = None
    tau_method: str = ""
    weights: np.ndarray = field(default=None, repr=False)

    @property
    def claim(self) -> str:
        if not self.certifiable:
            return "not-certifiable"
        return "certified" if self.tau_method == "exact-linear" else "empirical"


def robustness_lower_bound(w, xi, tau) -> float:
    w = np.asarray(w, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0):
        raise ValueError("Lipschitz constants must be >= 0")
    denom = np.sqrt(np.sum((w * tau) ** 2))
    if denom == 0:
        raise ValueError("all weighted Lipschitz constants are zero; the bound is unbounded")
    return float(np.dot(w, xi) / denom)


def exact_lipschitz(params) -> LipschitzEstimate:
    """tau[m, y, j] = ||W_y - W_j|| for single-layer encoders."""
    taus = []
    for m, p in enumerate(params):
        if not p.is_linear:
            raise ValueError(f"encoder {m} is not a single linear layer")
        W = p.weights[0]
        diff = W[:, :, None] - W[:, None, :]
        taus.append(np.sqrt((diff**2).sum(axis=0)))
    return LipschitzEstimate(np.stack(taus), "exact-linear")


def estimate_lipschitz(params, X, K: int, r: float, rng: RngStream) -> LipschitzEstimate:
    """Largest observed margin slope over ``K`` random probes per sample.

    Probe ``k`` draws a uniform direction and a radius in ``(0, r]``. Draws
    are made in probe order, so a larger ``K`` extends the same sample set
    and the estimate is nondecreasing in ``K``. This can only under-estimate
    the true constant.
    """
    if K < 1 or r <= 0:
        raise ValueError("need K >= 1 and r > 0")
    X = getattr(X, "X", X)
    taus = [np.zeros((p.n_classes, p.n_classes)) for p in params]
    base = [encoder_forward(p, x)[0] for p, x in zip(params, X)]
    for _ in range(K):
        for m, (p, x) in enumerate(zip(params, X)):
            d = rng.normal(size=x.shape)
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            rad = r * (1.0 - rng.uniform(size=(x.shape[0], 1)))
            z1 = encoder_forward(p, x + rad * d)[0]
            delta = base[m] - z1
            slope = np.abs(delta[:, :, None] - delta[:, None, :]) / rad[:, :, None]
            np.maximum(taus[m], slope.max(axis=0), out=taus[m])
    return LipschitzEstimate(np.stack(taus), "sampled", K, r)


def pair_bounds(bundle, y, tau: LipschitzEstimate) -> np.ndarray:
    """Per-pair bounds, shape (B, C); +inf at ``j == y`` and unreachable pairs."""
    y = np.asarray(y, dtype=np.intp)
    rows = np.arange(len(y))
    Z = np.stack(bundle.logits, axis=1)  # (B, M, C)
    xi = Z[rows, :, y][:, :, None] - Z  # (B, M, C)
    T = np.transpose(tau.tau[:, y, :], (1, 0, 2))  # (B, M, C)
    w = bundle.weights[:, :, None]
    num = (w * xi).sum(axis=1)
    den = np.sqrt(((w * T) ** 2).sum(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    out[rows, y] = np.inf
    return out


def exact_pair_radii_linear(params, bundle, y) -> np.ndarray:
    """Exact minimal L2 perturbations equalizing ``f_y`` and each ``f_j``.

    Shape (B, C); +inf at ``j == y`` and where the margin cannot change.
    """
    for m, p in enumerate(params):
        if not p.is_linear:
            raise ValueError(f"encoder {m} is not a single linear layer")
    y = np.asarray(y, dtype=np.intp)
    rows = np.arange(len(y))
    f = bundle.fused
    margin = f[rows, y][:, None] - f
    sq = np.zeros_like(f)
    for m, p in enumerate(params):
        W = p.weights[0]  # (d, C)
        diff = W[:, y].T[:, :, None] - W[None, :, :]  # (B, d, C)
        sq += (bundle.weights[:, m:m + 1] ** 2) * (diff**2).sum(axis=1)
    g = np.sqrt(sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(g > 0, margin / np.where(g > 0, g, 1.0), np.inf)
    out[rows, y] = np.inf
    return out


def exact_radius_linear(params, fusion: FusionSpec, X, y):
    """Exact fused robustness radius of linear encoders; returns ``(radius, j)`` arrays."""
    bundle = forward(params, fusion, X)
    radii = exact_pair_radii_linear(params, bundle, y)
    j = radii.argmin(axis=1)
    return radii[np.arange(len(j)), j], j


def fused_margin(bundle, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.intp)
    rows = np.arange(len(y))
    f = bundle.fused.copy()
    fy = f[rows, y].copy()
    f[rows, y] = -np.inf
    return fy - f.max(axis=1)


def certify(params, fusion: FusionSpec, X, y, tau: LipschitzEstimate, sample_ids=None,
            with_exact: bool | None = None) -> list[CertificationResult]:
    """Certify every sample of a batch. Misclassified samples get no bound."""
    y = np.asarray(y, dtype=np.intp)
    bundle = forward(params, fusion, X)
    bounds = pair_bounds(bundle, y, tau)
    margin = fused_margin(bundle, y)
    linear = all(p.is_linear for p in params)
    if with_exact is None:
        with_exact = linear
    exact = exact_pair_radii_linear(params, bundle, y).min(axis=1) if with_exact else None
    ids = range(len(y)) if sample_ids is None else sample_ids
    out = []
    for i, sid in enumerate(ids):
        res = CertificationResult(int(sid), bool(margin[i] > 0), bool(margin[i] >= 0), int(y[i]),
                                  tau_method=tau.method, weights=bundle.weights[i].copy())
        if res.certifiable:
            j = int(bounds[i].argmin())
            res.j = j
            # boundary samples sit at radius 0 by definition
            res.R_lb = 0.0 if margin[i] == 0 else float(bounds[i, j])
            if exact is not None:
                res.R_exact = float(exact[i])
        out.append(res)
    return out


def certify_sample(params, fusion: FusionSpec, x, y: int, tau: LipschitzEstimate) -> CertificationResult:
    X = [np.atleast_2d(v) for v in x]
    return certify(params, fusion, X, [y], tau)[0]


def _flip(bundle, y) -> np.ndarray:
    return fused_margin(bundle, y) <= 0


def gradient_probes(params, fusion, x, y: int, R: float, rng: RngStream, steps=50, restarts=8,
                    step_size=None) -> np.ndarray:
    """L2 projected ascent on ``f_j - f_y``; returns a flip flag per probe.

    One targeted probe per competitor starts at the clean input; ``restarts``
    untargeted probes start at random points of the ball.
    """
    x = [np.asarray(v, dtype=np.float64).reshape(-1) for v in x]
    dims = [len(v) for v in x]
    C = params[0].n_classes
    targets = [j for j in range(C) if j != y] + [-1] * restarts
    P = len(targets)
    R_eff = R * (1 - SHRINK)
    step = R / 25 if step_size is None else step_size
    delta = np.zeros((P, sum(dims)))
    if restarts:
        d = rng.normal(size=(restarts, sum(dims)))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        delta[-restarts:] = d * R_eff * rng.uniform(size=(restarts, 1))
    base = np.concatenate(x)
    yy = np.full(P, y)
    tgt = np.asarray(targets)
    flipped = np.zeros(P, dtype=bool)
    splits = np.cumsum(dims)[:-1]
    for it in range(steps + 1):
        Xp = np.split(base + delta, splits, axis=1)
        bundle = forward(params, fusion, Xp)
        flipped |= _flip(bundle, yy)
        if it == steps or flipped.all():
            break
        f = bundle.fused.copy()
        f[:, y] = -np.inf
        j = np.where(tgt >= 0, tgt, f.argmax(axis=1))
        g = np.zeros_like(f)
        g[np.arange(P), j] = 1.0
        g[:, y] -= 1.0
        _, dX = backward(params, bundle, grad_fused=g, need_inputs=True)
        grad = np.concatenate(dX, axis=1)
        n = np.linalg.norm(grad, axis=1, keepdims=True)
        delta = delta + step * np.where(n > 0, grad / np.where(n > 0, n, 1.0), 0.0)
        dn = np.linalg.norm(delta, axis=1, keepdims=True)
        delta = np.where(dn > R_eff, delta * (R_eff / np.where(dn > 0, dn, 1.0)), delta)
    return flipped


def attack_within_radius(params, fusion: FusionSpec, x, y: int, R: float, trials: int,
                         rng: RngStream, steps=50, restarts=8) -> int:
    """Count label flips among random and gradient probes with ``||delta|| <= R(1 - 1e-6)``."""
    if R < 0:
        raise ValueError("radius must be >= 0")
    if R == 0:
        return 0
    x = [np.asarray(v, dtype=np.float64).reshape(-1) for v in x]
    dims = [len(v) for v in x]
    R_eff = R * (1 - SHRINK)
    violations = 0
    if trials:
        d = rng.normal(size=(trials, sum(dims)))
        d *= R_eff / np.linalg.norm(d, axis=1, keepdims=True)
        Xp = np.split(np.concatenate(x) + d, np.cumsum(dims)[:-1], axis=1)
        violations += int(_flip(forward(params, fusion, Xp), np.full(trials, y)).sum())
    violations += int(gradient_probes(params, fusion, x, y, R, rng, steps, restarts).sum())
    return violations


def attack_radius(params, fusion: FusionSpec, x, y: int, rng: RngStream, r0: float = 1.0,
                  trials=64, steps=50, restarts=8, bisections=12, max_doublings=20) -> float:
    """Smallest radius (up to bisection tolerance) at which the attack finds a flip.

    An empirical upper bound on the true radius; +inf if nothing was found.
    """
    def hit(R):
        return attack_within_radius(params, fusion, x, y, R, trials, rng, steps, restarts) > 0

    lo, hi = 0.0, max(r0, 1e-6)
    for _ in range(max_doublings):
        if hit(hi):
            break
        lo, hi = hi, 2 * hi
    else:
        return float("inf")
    for _ in range(bisections):
        mid = 0.5 * (lo + hi)
        if hit(mid):
            hi = mid
        else:
            lo = mid
    return hi


CSV_COLUMNS = ["sample_id", "correct", "pair_y", "pair_j", "R_lb", "R_exact", "R_attack", "tau_method", "claim"]


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_certification_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in results:
            w.writerow([r.sample_id, int(r.correct), r.y, "" if r.j is None else r.j,
                        _fmt(r.R_lb), _fmt(r.R_exact), _fmt(r.R_attack), r.tau_method, r.claim])
