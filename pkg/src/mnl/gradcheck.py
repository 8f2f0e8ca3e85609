"""Central finite-difference checks of every analytic gradient in the package."""

from __future__ import annotations

import numpy as np

from mnl.guidance import (allclass_grad_logits, allclass_guidance_loss, mnl_grad_logits, mnl_loss,
                          select_guidance, total_loss, ucom)
from mnl.model import FusionSpec, backward, encoder_forward, forward, init_encoder
from mnl.numerics import RngStream, cross_entropy, softmax

STEP = 1e-5
# entries smaller than this are compared in absolute terms
REL_FLOOR = 1e-4


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def numeric_grad(f, arrays, h: float = STEP) -> list[np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. each array, perturbed in place."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            fp = f()
            arr[i] = old - h
            fm = f()
            arr[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def _kink_free(params, X, margin=1e-3) -> bool:
    for p, x in zip(params, X):
        _, cache = encoder_forward(p, x)
        for _, a in cache[:-1]:
            if np.any(np.abs(a) < margin):
                return False
    return True


def random_config(rng: RngStream, n_classes: int, batch: int):
    M = 2
    dims = [int(rng.integers(2, 6)) for _ in range(M)]
    depth = int(rng.integers(0, 3))
    hidden = [int(rng.integers(3, 9)) for _ in range(depth)]
    while True:
        params = [init_encoder(d, hidden, n_classes, rng.child(f"enc-{m}")) for m, d in enumerate(dims)]
        for p in params:
            for b in p.biases:
                b[:] = rng.normal(0, 0.3, size=b.shape)
        X = [rng.normal(size=(batch, d)) for d in dims]
        if _kink_free(params, X):
            break
    y = rng.integers(0, n_classes, size=batch)
    if rng.uniform() < 0.5:
        w = rng.uniform(0.1, 0.9)
        fusion = FusionSpec("static", (w, 1 - w))
    else:
        fusion = FusionSpec("dynamic", temperature=float(rng.uniform(0.2, 2.0)))
    return params, fusion, X, y


def check_config(rng: RngStream, n_classes: int, batch: int) -> dict:
    """Worst relative error per loss for one random configuration."""
    params, fusion, X, y = random_config(rng, n_classes, batch)
    errs = {}

    z = rng.normal(0, 2, size=(batch, n_classes))
    a = softmax(rng.normal(0, 2, size=(batch, n_classes)))

    def rowwise(loss):
        # each row's loss only sees its own logits; differencing rows alone keeps roundoff small
        num = np.zeros_like(z)
        for i in range(batch):
            row = z[i]
            num[i] = numeric_grad(lambda: float(loss(a[i], row, y[i])), [row])[0]
        return num

    g = softmax(z)
    g[np.arange(batch), y] -= 1
    errs["ce"] = rel_error(g, rowwise(lambda _a, zi, yi: cross_entropy(zi, yi)))
    errs["mnl"] = rel_error(mnl_grad_logits(a, z, y),
                            rowwise(lambda ai, zi, yi: mnl_loss(ai, softmax(zi), yi)))
    errs["allclass"] = rel_error(allclass_grad_logits(a, z, y),
                                 rowwise(lambda ai, zi, yi: allclass_guidance_loss(ai, softmax(zi), yi)))

    base = forward(params, fusion, X)
    w0 = np.array(base.weights)
    p0 = [p.copy() for p in base.probs]
    xi = [ucom(zz, y)[0] for zz in base.logits]
    mode = ("robust", "confident", "prior")[int(rng.integers(0, 3))]
    decision = select_guidance(base.probs, xi, y, mode, int(rng.integers(0, 2)))
    lam = float(rng.uniform(0.1, 2.0))
    scope = ("non-target", "all-class")[int(rng.integers(0, 2))]
    reduction = ("active", "all")[int(rng.integers(0, 2))]
    ce_w = tuple(rng.uniform(0.5, 1.5, size=2))

    def total():
        b = forward(params, fusion, X, weights=w0)
        return total_loss(b, decision, y, lam, "full", scope, ce_w, reduction, rdm_probs=p0)[0].total

    _, gf, gm = total_loss(base, decision, y, lam, "full", scope, ce_w, reduction, rdm_probs=p0)
    grads = backward(params, base, gf, gm)
    arrays = [arr for p in params for arr in p.arrays()]
    analytic = np.concatenate([arr.ravel() for g in grads for arr in g.arrays()])
    numeric = np.concatenate([g.ravel() for g in numeric_grad(total, arrays)])
    errs["total"] = rel_error(analytic, numeric)
    return errs


def run_gradcheck(n_configs: int = 100, seed: int = 0, classes=(2, 3, 10), batches=(1, 8)) -> dict:
    rng = RngStream(seed).child("gradcheck")
    worst = {"ce": 0.0, "mnl": 0.0, "allclass": 0.0, "total": 0.0}
    for k in range(n_configs):
        C = classes[k % len(classes)]
        B = batches[(k // len(classes)) % len(batches)]
        errs = check_config(rng.child(f"config-{k}"), C, B)
        for name, e in errs.items():
            worst[name] = max(worst[name], e)
    worst["max"] = max(worst.values())
    worst["n_configs"] = n_configs
    return worst
