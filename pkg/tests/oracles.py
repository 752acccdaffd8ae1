"""Slow, index-free reference implementations used as test oracles.

Nothing here calls into the package's numerical code. Inputs are plain
arrays (or package dataclasses read only for their fields).
"""

from __future__ import annotations

import math

import numpy as np

ETA = 3.0
EPS_COLOR = 1e-6
BLUR = 0.3
ALPHA_MAX = 0.99
CUTOFF = 3.0


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def sort_quantile(values, q):
    """Linear interpolation between order statistics at position (n - 1) q."""
    x = sorted(float(v) for v in np.ravel(values))
    if not x:
        raise ValueError("empty")
    h = (len(x) - 1) * q
    lo = math.floor(h)
    hi = min(lo + 1, len(x) - 1)
    return x[lo] + (h - lo) * (x[hi] - x[lo])


def sort_median(values):
    x = sorted(float(v) for v in np.ravel(values))
    n = len(x)
    return x[n // 2] if n % 2 else 0.5 * (x[n // 2 - 1] + x[n // 2])


def power_iteration(A, iters=5000, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=A.shape[0])
    lam = 0.0
    for _ in range(iters):
        w = A @ v
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
        new = float(v @ A @ v)
        if abs(new - lam) <= 1e-15 * max(abs(new), 1.0):
            return new
        lam = new
    return lam


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def brute_nearest(queries, points):
    queries = np.asarray(queries, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    out = np.empty(len(queries), dtype=np.int64)
    for i, q in enumerate(queries):
        d2 = np.sum((points - q) ** 2, axis=1)
        out[i] = int(np.argmin(d2))
    return out


def linear_ball(query, points, radius):
    return [j for j, p in enumerate(points) if math.dist(query, p) <= radius]


def in_frustum(x, cam, z_near=0.01, z_far=1000.0):
    pc = cam.R @ np.asarray(x, dtype=np.float64) + cam.t
    if not (z_near < pc[2] < z_far):
        return False
    u = cam.fx * pc[0] / pc[2] + cam.cx
    v = cam.fy * pc[1] / pc[2] + cam.cy
    return 0 <= u < cam.width and 0 <= v < cam.height


def fim_loop(x, cams, z_near=0.01, z_far=1000.0):
    x = np.asarray(x, dtype=np.float64)
    H = np.zeros((3, 3))
    for cam in cams:
        if not in_frustum(x, cam, z_near, z_far):
            continue
        o = -cam.R.T @ cam.t
        ray = x - o
        d2 = float(ray @ ray)
        v = ray / math.sqrt(d2)
        for a in range(3):
            for b in range(3):
                H[a, b] += ((1.0 if a == b else 0.0) - v[a] * v[b]) / d2
    return H


def pinv_eig(H, rtol=1e-10):
    w, V = np.linalg.eigh(H)
    cut = rtol * w[-1]
    inv = np.array([1.0 / x if x > cut and x > 0 else 0.0 for x in w])
    return (V * inv) @ V.T


def kgeo(mu_i, S_i, mu_j, S_j):
    M = np.asarray(S_i) + np.asarray(S_j)
    tr = np.trace(M)
    if np.linalg.det(M) <= 1e-15 * (tr / 3) ** 3:
        M = M + 1e-9 * tr / 3 * np.eye(3)
    d = np.asarray(mu_i, dtype=np.float64) - np.asarray(mu_j, dtype=np.float64)
    return float(np.exp(-0.5 * d @ np.linalg.inv(M) @ d))


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def exhaustive_scores(src_mu, src_eff, src_color, sigma_ci_sq, tgt_mu, tgt_eff, tgt_color, eta=ETA):
    """Per-primitive (delta_geo, delta_app) by scanning every target primitive."""
    n = len(src_mu)
    dg = np.ones(n)
    da = np.ones(n)
    sig = np.broadcast_to(np.asarray(sigma_ci_sq, dtype=np.float64), (n,))
    for i in range(n):
        lam = np.linalg.eigvalsh(src_eff[i])[-1]
        r = eta * math.sqrt(max(lam, 0.0))
        d = np.sqrt(np.sum((tgt_mu - src_mu[i]) ** 2, axis=1))
        cand = np.flatnonzero(d <= r)
        if len(cand) == 0:
            continue
        M = src_eff[i][None] + tgt_eff[cand]
        delta = src_mu[i][None] - tgt_mu[cand]
        q = np.einsum("pi,pij,pj->p", delta, np.linalg.inv(M), delta)
        dg[i] = 1.0 - np.max(np.exp(-0.5 * q))
        c2 = np.sum((tgt_color[cand] - src_color[i]) ** 2, axis=1)
        da[i] = 1.0 - np.max(np.exp(-c2 / (2.0 * sig[i])))
    return dg, da


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def project_2d(mu, cov, cam, blur=BLUR):
    """(depth, mean(2,), inverse 2D covariance) for one primitive, or None if clipped."""
    pc = cam.R @ mu + cam.t
    x, y, z = pc
    if not (0.01 < z < 1000.0):
        return None
    J = np.array([[cam.fx / z, 0.0, -cam.fx * x / z**2], [0.0, cam.fy / z, -cam.fy * y / z**2]])
    S = J @ cam.R @ cov @ cam.R.T @ J.T + blur * np.eye(2)
    return z, np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy]), np.linalg.inv(S)


def render_per_pixel(mu, cov, opacity, channel, cam, blur=BLUR):
    """Direct per-pixel compositing over every primitive (no tiling, no culling)."""
    mu = np.asarray(mu, dtype=np.float64)
    channel = np.atleast_2d(np.asarray(channel, dtype=np.float64))
    proj = []
    for k in range(len(mu)):
        p = project_2d(mu[k], cov[k], cam, blur)
        if p is not None:
            proj.append((p[0], k, p[1], p[2]))
    proj.sort(key=lambda t: (t[0], t[1]))
    img = np.zeros((len(channel), cam.height, cam.width))
    if not proj:
        return img
    idx = np.array([t[1] for t in proj])
    means = np.array([t[2] for t in proj])
    conics = np.array([t[3] for t in proj])
    op = np.asarray(opacity, dtype=np.float64)[idx]
    vals = channel[:, idx]
    for r in range(cam.height):
        for c in range(cam.width):
            d = np.array([c + 0.5, r + 0.5])[None] - means
            q = np.einsum("pi,pij,pj->p", d, conics, d)
            a = np.where(q <= CUTOFF**2, np.minimum(ALPHA_MAX, op * np.exp(-0.5 * q)), 0.0)
            T = 1.0
            acc = np.zeros(len(channel))
            for k in range(len(a)):
                if a[k] == 0.0:
                    continue
                acc += vals[:, k] * a[k] * T
                T *= 1.0 - a[k]
            img[:, r, c] = acc
    return np.clip(img, 0.0, 1.0)


def render_rows(mu, cov, opacity, channel, cam, blur=BLUR):
    """Same maths as :func:`render_per_pixel`, vectorised over one image row at a time."""
    mu = np.asarray(mu, dtype=np.float64)
    channel = np.atleast_2d(np.asarray(channel, dtype=np.float64))
    pc = mu @ cam.R.T + cam.t
    z = pc[:, 2]
    ok = np.flatnonzero((z > 0.01) & (z < 1000.0))
    order = ok[np.lexsort((ok, z[ok]))]
    img = np.zeros((len(channel), cam.height, cam.width))
    if len(order) == 0:
        return img
    x, y, zz = pc[order].T
    J = np.zeros((len(order), 2, 3))
    J[:, 0, 0] = cam.fx / zz
    J[:, 0, 2] = -cam.fx * x / zz**2
    J[:, 1, 1] = cam.fy / zz
    J[:, 1, 2] = -cam.fy * y / zz**2
    T2 = J @ cam.R
    S = T2 @ cov[order] @ T2.transpose(0, 2, 1) + blur * np.eye(2)
    conic = np.linalg.inv(S)
    mx = cam.fx * x / zz + cam.cx
    my = cam.fy * y / zz + cam.cy
    op = np.asarray(opacity, dtype=np.float64)[order]
    vals = channel[:, order]
    px = np.arange(cam.width) + 0.5
    for r in range(cam.height):
        dx = px[None, :] - mx[:, None]
        dy = (r + 0.5) - my[:, None]
        q = conic[:, 0, 0, None] * dx**2 + 2 * conic[:, 0, 1, None] * dx * dy + conic[:, 1, 1, None] * dy**2
        a = np.where(q <= CUTOFF**2, np.minimum(ALPHA_MAX, op[:, None] * np.exp(-0.5 * q)), 0.0)
        T = np.vstack([np.ones((1, cam.width)), np.cumprod(1.0 - a, axis=0)[:-1]])
        img[:, r, :] = vals @ (a * T)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def pooled_iou(preds, gts):
    inter = sum(int(np.logical_and(p, g).sum()) for p, g in zip(preds, gts))
    union = sum(int(np.logical_or(p, g).sum()) for p, g in zip(preds, gts))
    return 1.0 if union == 0 else inter / union


def routing_ba(pred_labels, gt_labels):
    """Mean of per-class recalls on pixels changed in both prediction and truth."""
    p = np.concatenate([np.ravel(x) for x in pred_labels])
    g = np.concatenate([np.ravel(x) for x in gt_labels])
    m = (p > 0) & (g > 0)
    recalls = []
    for cls in (1, 2):
        n = int(np.sum(g[m] == cls))
        if n:
            recalls.append(int(np.sum((g[m] == cls) & (p[m] == cls))) / n)
    return float(np.mean(recalls))


def auroc_pairs(scores, labels):
    """Probability a random positive outscores a random negative (ties half)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    pos = np.sort(s[y])
    neg = np.sort(s[~y])
    less = np.searchsorted(neg, pos, side="left")
    leq = np.searchsorted(neg, pos, side="right")
    return float(np.sum(less + 0.5 * (leq - less)) / (len(pos) * len(neg)))


# ---------------------------------------------------------------------------
# whole pipeline
# ---------------------------------------------------------------------------


def _visible_any(points, cams):
    return np.array([any(in_frustum(p, c) for c in cams) for p in points])


def exhaustive_pipeline(scene1, scene2, views, geo_q=0.75, color_q=0.5, conf_q=0.25, eta=ETA, threshold=0.5):
    """Index-free end-to-end run. Returns a dict of per-scene scores and per-view maps.

    ``scene*`` only need ``mu, cov, normal, color, opacity, cameras``.
    """
    scenes = []
    for s in (scene1, scene2):
        keep = _visible_any(s.mu, scene1.cameras) & _visible_any(s.mu, scene2.cameras)
        scenes.append({k: getattr(s, k)[keep] for k in ("mu", "cov", "normal", "color", "opacity")}
                      | {"cameras": s.cameras, "keep": np.flatnonzero(keep)})
    a, b = scenes

    def nn_disp(src, tgt):
        nn = brute_nearest(src["mu"], tgt["mu"])
        d = tgt["mu"][nn] - src["mu"]
        dn = np.abs(np.sum(d * src["normal"], axis=1))
        dt = np.linalg.norm(d - (np.sum(d * src["normal"], axis=1))[:, None] * src["normal"], axis=1)
        return nn, dn, dt

    nn_ab, dn1, dt1 = nn_disp(a, b)
    nn_ba, dn2, dt2 = nn_disp(b, a)
    un = 0.5 * (sort_quantile(dn1, geo_q) ** 2 + sort_quantile(dn2, geo_q) ** 2)
    ut = 0.5 * (sort_quantile(dt1, geo_q) ** 2 + sort_quantile(dt2, geo_q) ** 2)

    for s in scenes:
        n = s["normal"]
        s["tilde"] = s["cov"] + ut * np.eye(3) + (un - ut) * n[:, :, None] * n[:, None, :]
        s["H"] = np.array([fim_loop(x, s["cameras"]) for x in s["mu"]])
        s["Hp"] = np.array([pinv_eig(h) for h in s["H"]])
        den = sort_median([np.trace(h) for h in s["Hp"]])
        s["s"] = 0.0 if den == 0 else sort_median([np.trace(t) for t in s["tilde"]]) / den
        s["eff"] = s["tilde"] + s["s"] * s["Hp"]

    def color_stat(src, tgt, nn):
        prods = []
        for i, j in enumerate(nn):
            w = kgeo(src["mu"][i], src["eff"][i], tgt["mu"][j], tgt["eff"][j])
            prods.append(w * float(np.sum((src["color"][i] - tgt["color"][j]) ** 2)))
        return sort_quantile(prods, color_q)

    sc2 = max(0.5 * (color_stat(a, b, nn_ab) + color_stat(b, a, nn_ba)), EPS_COLOR)

    for src, tgt in ((a, b), (b, a)):
        tr = np.array([np.trace(e) for e in src["eff"]])
        h2 = sort_median(tr)
        sig = sc2 * np.maximum(tr / h2, 1.0)
        src["dg"], src["da"] = exhaustive_scores(src["mu"], src["eff"], src["color"], sig,
                                                 tgt["mu"], tgt["eff"], tgt["color"], eta)
        trH = np.array([np.trace(h) for h in src["H"]])
        ref = sort_quantile(trH, conf_q)
        src["omega"] = 1.0 / (1.0 + np.exp(-(np.log(trH) - np.log(ref))))
        src["comb"] = src["omega"] * np.minimum(src["dg"] + src["da"], 1.0)
        src["surf"] = np.maximum(src["da"] - src["dg"], 0.0)

    maps = {}
    for cam in views:
        rendered = [render_rows(s["mu"], s["cov"], s["opacity"], np.stack([s["comb"], s["dg"], s["surf"]]), cam)
                    for s in scenes]
        M, g, f = np.maximum(rendered[0], rendered[1])
        binary = M > threshold
        labels = np.where(binary, np.where(f > g, 2, 1), 0)
        maps[cam.id] = {"M": M, "binary": binary, "labels": labels}
    return {"scenes": scenes, "u_n_sq": un, "u_t_sq": ut, "sigma_c_sq": sc2, "maps": maps}
