"""Grabcut: hard-assignment colour GMMs alternated with exact graph cuts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._validation import check_image, rng_for
from .camera import LIKELY_BG, LIKELY_FG, SURE_BG, SURE_FG
from .maxflow import FlowNetwork, max_flow

__all__ = ["Gmm", "GrabcutParams", "PreparedImage", "fit_gmm", "grabcut", "pairwise_weights"]

VARIANCE_FLOOR = 1e-4
_LOG_2PI = np.log(2 * np.pi)
# forward half of the 8-neighbourhood: (dy, dx)
NEIGHBOR_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))


@dataclass(frozen=True)
class GrabcutParams:
    gmm_components: int = 5
    iterations: int = 5
    gamma: float = 50.0
    variance_floor: float = VARIANCE_FLOOR
    # colour models see every ``fit_stride``-th SURE_BG pixel outside the working crop
    fit_stride: int = 1

    def __post_init__(self):
        if self.gmm_components < 1:
            raise ValueError("gmm_components must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not self.variance_floor > 0:
            raise ValueError("variance_floor must be > 0")
        if self.fit_stride < 1:
            raise ValueError("fit_stride must be >= 1")


class Gmm:
    """Gaussian mixture over RGB with eigenvalue-floored covariances."""

    def __init__(self, weights, means, covs, variance_floor=VARIANCE_FLOOR):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.asarray(means, dtype=float)
        covs = np.asarray(covs, dtype=float)
        evals, evecs = np.linalg.eigh((covs + covs.transpose(0, 2, 1)) / 2)
        evals = np.maximum(evals, variance_floor)
        self.covs = np.einsum("kij,kj,klj->kil", evecs, evals, evecs)
        self.inv_covs = np.einsum("kij,kj,klj->kil", evecs, 1.0 / evals, evecs)
        self.active = self.weights > 0
        with np.errstate(divide="ignore"):
            self.offsets = -np.log(self.weights) + 0.5 * np.log(evals).sum(axis=1) + 1.5 * _LOG_2PI
        self.variance_floor = variance_floor

    @property
    def n_components(self):
        return len(self.weights)

    def assign(self, x):
        """Best component per row and its negative log-density (weight included)."""
        return _kernels.gmm_assign(
            np.ascontiguousarray(x, dtype=float), self.means, self.inv_covs, self.offsets, self.active
        )

    def classification_loglik(self, x) -> float:
        return -float(self.assign(x)[1].sum())

    @classmethod
    def estimate(cls, x, labels, K, variance_floor=VARIANCE_FLOOR) -> "Gmm":
        counts, sums, outer = _kernels.gmm_stats(np.ascontiguousarray(x, dtype=float), labels, K)
        safe = np.maximum(counts, 1.0)
        means = sums / safe[:, None]
        covs = outer / safe[:, None, None] - means[:, :, None] * means[:, None, :]
        return cls(counts / counts.sum(), means, covs, variance_floor)


def fit_gmm(pixels, K: int = 5, seed: int = 0, n_iter: int = 10,
            variance_floor: float = VARIANCE_FLOOR, return_history: bool = False):
    """k-means++ seeding, nearest-seed assignment, then hard-assignment refinement.

    The classification log-likelihood recorded after every assignment pass is
    non-decreasing; iteration stops early once assignments are stable.
    """
    x = np.ascontiguousarray(np.asarray(pixels, dtype=float).reshape(-1, 3))
    if len(x) == 0:
        raise ValueError("fit_gmm needs at least one pixel")
    if K < 1:
        raise ValueError("K must be >= 1")
    uniforms = rng_for(seed).random(K)
    labels = _kernels.nearest_center(x, _kernels.kmeanspp_seed(x, K, uniforms))
    gmm = Gmm.estimate(x, labels, K, variance_floor)
    history = []
    for _ in range(n_iter):
        new_labels, cost = gmm.assign(x)
        history.append(-float(cost.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        gmm = Gmm.estimate(x, labels, K, variance_floor)
    return (gmm, history) if return_history else gmm


def pairwise_weights(image):
    """Contrast terms ``exp(-beta |z_i - z_j|^2) / dist`` for the forward 8-neighbour offsets.

    ``beta = 1 / (2 <|z_i - z_j|^2>)`` over all neighbour pairs of the image.
    Returns ``(weights, beta)``; ``weights[d][y, x]`` couples pixel ``(y, x)``
    with ``(y + dy, x + dx)`` and is zero where that neighbour is off-image.
    """
    z = np.asarray(image, dtype=float)
    H, W = z.shape[:2]
    diffs = []
    total, count = 0.0, 0
    for dy, dx in NEIGHBOR_OFFSETS:
        d2 = np.zeros((H, W))
        ys = slice(0, H - dy)
        xs = slice(max(0, -dx), W - max(0, dx))
        yt = slice(dy, H)
        xt = slice(max(0, dx), W - max(0, -dx))
        d2[ys, xs] = ((z[ys, xs] - z[yt, xt]) ** 2).sum(axis=2)
        total += d2[ys, xs].sum()
        count += d2[ys, xs].size
        valid = np.zeros((H, W), bool)
        valid[ys, xs] = True
        diffs.append((d2, valid, np.hypot(dy, dx)))
    mean = total / max(count, 1)
    beta = 1.0 / (2.0 * mean) if mean > 0 else 0.0
    weights = [np.where(valid, np.exp(-beta * d2) / dist, 0.0) for d2, valid, dist in diffs]
    return weights, beta


class PreparedImage:
    """Pixel array and contrast weights of one image, reusable across many Grabcut calls."""

    def __init__(self, image):
        image = check_image(image)
        self.shape = image.shape[:2]
        self.pixels = np.ascontiguousarray(image.reshape(-1, 3), dtype=float)
        self.weights, self.beta = pairwise_weights(image)


def _pair_slices(h, w, dy, dx):
    a = (slice(0, h - dy), slice(max(0, -dx), w - max(0, dx)))
    b = (slice(dy, h), slice(max(0, dx), w - max(0, -dx)))
    return a, b


class _CropGraph:
    """Graph skeleton over the LIKELY pixels of a trimap; only unaries change per iteration."""

    def __init__(self, prep: PreparedImage, trimap, gamma):
        H, W = prep.shape
        rows = np.flatnonzero((trimap != SURE_BG).any(axis=1))
        cols = np.flatnonzero((trimap != SURE_BG).any(axis=0))
        self.y0, self.y1 = max(rows[0] - 1, 0), min(rows[-1] + 2, H)
        self.x0, self.x1 = max(cols[0] - 1, 0), min(cols[-1] + 2, W)
        t = trimap[self.y0:self.y1, self.x0:self.x1]
        h, w = t.shape
        unknown = (t == LIKELY_FG) | (t == LIKELY_BG)
        idx = np.full((h, w), -1, np.int64)
        idx[unknown] = np.arange(unknown.sum())
        flat = (np.arange(self.y0, self.y1)[:, None] * W + np.arange(self.x0, self.x1)[None, :])
        self.node_pixels = flat[unknown]
        self.n = len(self.node_pixels)
        self.crop_trimap = t
        self.unknown = unknown
        self.idx = idx
        n = self.n
        src_extra = np.zeros(n)
        snk_extra = np.zeros(n)
        edges, caps = [], []
        self.pairs = []
        for d, (dy, dx) in enumerate(NEIGHBOR_OFFSETS):
            wgt = gamma * prep.weights[d][self.y0:self.y1, self.x0:self.x1]
            A, B = _pair_slices(h, w, dy, dx)
            wab = wgt[A]
            tA, tB = t[A], t[B]
            uA, uB = unknown[A], unknown[B]
            iA, iB = idx[A], idx[B]
            both = uA & uB
            edges.append(np.stack([iA[both], iB[both]], axis=1))
            caps.append(wab[both])
            for u_side, i_side, other in ((uA, iA, tB), (uB, iB, tA)):
                sel = u_side & (other == SURE_FG)
                src_extra += np.bincount(i_side[sel], wab[sel], minlength=n)
                sel = u_side & (other == SURE_BG)
                snk_extra += np.bincount(i_side[sel], wab[sel], minlength=n)
            self.pairs.append((A, B, wab))
        self.edges = np.concatenate(edges) if edges else np.zeros((0, 2), np.int64)
        self.caps = np.concatenate(caps) if caps else np.zeros(0)
        self.src_extra = src_extra
        self.snk_extra = snk_extra
        self.net = FlowNetwork(n, np.zeros(n), np.zeros(n), self.edges, self.caps, self.caps)

    def solve(self, d_fg, d_bg):
        """Foreground indicator for the LIKELY nodes (source side = foreground)."""
        if self.n == 0:
            return np.zeros(0, bool)
        # a per-node constant does not move the cut; keeps capacities non-negative
        m = np.minimum(d_fg, d_bg)
        return max_flow(self.net.with_terminals(d_bg - m + self.src_extra, d_fg - m + self.snk_extra))[1]

    def smoothness(self, fg_full, W):
        crop = fg_full.reshape(-1, W)[self.y0:self.y1, self.x0:self.x1]
        return float(sum(wab[crop[A] != crop[B]].sum() for A, B, wab in self.pairs))


def grabcut(image, trimap, params: GrabcutParams = GrabcutParams(), seed: int = 0,
            return_log: bool = False):
    """Segment ``image`` from a four-class trimap.

    SURE pixels are hard constraints.  Each iteration refits both colour
    models on the current partition and relabels the LIKELY pixels with one
    exact min-cut.  With ``return_log`` also returns a list of
    ``(iteration, energy, fg_count)`` rows; the energy (data + smoothness) is
    non-increasing.  With ``fit_stride > 1`` the data term, and so the logged
    energy, covers only the retained pixels: the working crop plus a regular
    subsample of the remaining background.
    """
    prep = image if isinstance(image, PreparedImage) else PreparedImage(image)
    trimap = np.asarray(trimap)
    if trimap.shape != prep.shape:
        raise ValueError(f"dimension mismatch: image {prep.shape} vs trimap {trimap.shape}")
    fg = ((trimap == SURE_FG) | (trimap == LIKELY_FG)).ravel()
    if not fg.any():
        raise ValueError("trimap has no SURE_FG or LIKELY_FG pixel (empty foreground seed)")
    if fg.all():
        raise ValueError("trimap has no LIKELY_BG or SURE_BG pixel (empty background seed)")
    K = params.gmm_components
    floor = params.variance_floor
    H, W = prep.shape
    z = prep.pixels
    graph = _CropGraph(prep, trimap, params.gamma)
    node_z = z[graph.node_pixels]
    if params.fit_stride > 1:
        keep = np.zeros(H * W, bool)
        keep[::params.fit_stride] = True
        keep.reshape(H, W)[graph.y0:graph.y1, graph.x0:graph.x1] = True
        kept = np.flatnonzero(keep)
        z = z[kept]
        fg_kept = fg[kept]
        # crop pixels are always retained; map node pixels into the reduced index
        pos = np.cumsum(keep) - 1
        node_idx = pos[graph.node_pixels]
    else:
        fg_kept = fg
        node_idx = graph.node_pixels

    rng = rng_for(seed)
    s_fg, s_bg = (int(s) for s in rng.integers(0, 2**63 - 1, size=2))
    gmm_fg = fit_gmm(z[fg_kept], K, s_fg, n_iter=2, variance_floor=floor)
    gmm_bg = fit_gmm(z[~fg_kept], K, s_bg, n_iter=2, variance_floor=floor)

    log = []

    def refit(gmm_f, gmm_b):
        xf, xb = z[fg_kept], z[~fg_kept]
        lf, cf = gmm_f.assign(xf)
        lb, cb = gmm_b.assign(xb)
        data = float(cf.sum() + cb.sum())
        return Gmm.estimate(xf, lf, K, floor), Gmm.estimate(xb, lb, K, floor), data

    for it in range(params.iterations):
        if it > 0:
            gmm_fg, gmm_bg, data = refit(gmm_fg, gmm_bg)
            if return_log:
                log.append((it - 1, data + graph.smoothness(fg, W), int(fg.sum())))
        node_fg = graph.solve(gmm_fg.assign(node_z)[1], gmm_bg.assign(node_z)[1])
        fg[graph.node_pixels] = node_fg
        fg_kept[node_idx] = node_fg
        if fg.all() or not fg.any():
            # one class vanished; nothing left to refit against
            break
    if return_log:
        data = 0.0
        if fg_kept.any():
            data += float(gmm_fg.assign(z[fg_kept])[1].sum())
        if not fg_kept.all():
            data += float(gmm_bg.assign(z[~fg_kept])[1].sum())
        log.append((it, data + graph.smoothness(fg, W), int(fg.sum())))
        return fg.reshape(H, W), log
    return fg.reshape(H, W)
