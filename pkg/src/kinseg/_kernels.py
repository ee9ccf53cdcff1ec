"""Compiled inner loops: Boykov-Kolmogorov max-flow, GMM passes, capsule rasterization.

All kernels are ``nogil`` so frame-level thread pools scale.
"""
import numpy as np
from numba import njit

_FREE = -3
_ORPHAN = -2
_TERMINAL = -1
_INF_D = 1 << 30


@njit(cache=True, nogil=True)
def _set_active(i, nxt, qstate):
    # qstate = [first, last]
    if nxt[i] == -1:
        if qstate[1] >= 0:
            nxt[qstate[1]] = i
        else:
            qstate[0] = i
        qstate[1] = i
        nxt[i] = i


@njit(cache=True, nogil=True)
def _next_active(nxt, qstate, parent):
    while True:
        i = qstate[0]
        if i < 0:
            return -1
        if nxt[i] == i:
            qstate[0] = -1
            qstate[1] = -1
        else:
            qstate[0] = nxt[i]
        nxt[i] = -1
        if parent[i] != _FREE:
            return i


@njit(cache=True, nogil=True)
def bk_maxflow(first, head, sister, rcap, tr_cap):
    """Boykov-Kolmogorov augmenting-path max-flow on a CSR graph.

    ``first`` (n+1) indexes arcs by tail; ``sister[a]`` is the reverse arc.
    ``rcap`` and ``tr_cap`` are residual capacities and are modified in place;
    ``tr_cap[i] > 0`` is residual source->i, ``< 0`` is residual i->sink.
    Returns the flow pushed through the network (direct terminal flow excluded).
    """
    n = tr_cap.shape[0]
    parent = np.full(n, _FREE, np.int64)
    is_sink = np.zeros(n, np.bool_)
    ts = np.zeros(n, np.int64)
    dist = np.zeros(n, np.int64)
    nxt = np.full(n, -1, np.int64)
    qstate = np.array([-1, -1], np.int64)
    # orphan deque as a ring buffer; a node is queued at most once at a time
    orph = np.empty(n + 1, np.int64)
    ocap = n + 1
    ohead = 0
    ocount = 0
    tail_of = np.empty(head.shape[0], np.int64)
    for i in range(n):
        for a in range(first[i], first[i + 1]):
            tail_of[a] = i

    for i in range(n):
        if tr_cap[i] > 0:
            parent[i] = _TERMINAL
            dist[i] = 1
            _set_active(i, nxt, qstate)
        elif tr_cap[i] < 0:
            is_sink[i] = True
            parent[i] = _TERMINAL
            dist[i] = 1
            _set_active(i, nxt, qstate)

    flow = 0.0
    time = 0
    current = -1
    while True:
        i = -1
        if current >= 0:
            i = current
            nxt[i] = -1
            if parent[i] == _FREE:
                i = -1
        if i < 0:
            i = _next_active(nxt, qstate, parent)
            if i < 0:
                break

        # growth
        mid = -1
        if not is_sink[i]:
            for a in range(first[i], first[i + 1]):
                if rcap[a] > 0:
                    j = head[a]
                    if parent[j] == _FREE:
                        is_sink[j] = False
                        parent[j] = sister[a]
                        ts[j] = ts[i]
                        dist[j] = dist[i] + 1
                        _set_active(j, nxt, qstate)
                    elif is_sink[j]:
                        mid = a
                        break
                    elif ts[j] <= ts[i] and dist[j] > dist[i]:
                        parent[j] = sister[a]
                        ts[j] = ts[i]
                        dist[j] = dist[i] + 1
        else:
            for a in range(first[i], first[i + 1]):
                if rcap[sister[a]] > 0:
                    j = head[a]
                    if parent[j] == _FREE:
                        is_sink[j] = True
                        parent[j] = sister[a]
                        ts[j] = ts[i]
                        dist[j] = dist[i] + 1
                        _set_active(j, nxt, qstate)
                    elif not is_sink[j]:
                        mid = sister[a]
                        break
                    elif ts[j] <= ts[i] and dist[j] > dist[i]:
                        parent[j] = sister[a]
                        ts[j] = ts[i]
                        dist[j] = dist[i] + 1
        time += 1

        if mid < 0:
            current = -1
            continue

        nxt[i] = i
        current = i

        # augment along source-tree path -> mid -> sink-tree path
        bott = rcap[mid]
        k = tail_of[mid]
        while parent[k] != _TERMINAL:
            a2 = parent[k]
            if rcap[sister[a2]] < bott:
                bott = rcap[sister[a2]]
            k = head[a2]
        if tr_cap[k] < bott:
            bott = tr_cap[k]
        k = head[mid]
        while parent[k] != _TERMINAL:
            a2 = parent[k]
            if rcap[a2] < bott:
                bott = rcap[a2]
            k = head[a2]
        if -tr_cap[k] < bott:
            bott = -tr_cap[k]

        rcap[sister[mid]] += bott
        rcap[mid] -= bott
        k = tail_of[mid]
        while True:
            a2 = parent[k]
            if a2 == _TERMINAL:
                break
            rcap[a2] += bott
            rcap[sister[a2]] -= bott
            if rcap[sister[a2]] == 0:
                parent[k] = _ORPHAN
                ohead = (ohead - 1 + ocap) % ocap
                orph[ohead] = k
                ocount += 1
            k = head[a2]
        tr_cap[k] -= bott
        if tr_cap[k] == 0:
            parent[k] = _ORPHAN
            ohead = (ohead - 1 + ocap) % ocap
            orph[ohead] = k
            ocount += 1
        k = head[mid]
        while True:
            a2 = parent[k]
            if a2 == _TERMINAL:
                break
            rcap[sister[a2]] += bott
            rcap[a2] -= bott
            if rcap[a2] == 0:
                parent[k] = _ORPHAN
                ohead = (ohead - 1 + ocap) % ocap
                orph[ohead] = k
                ocount += 1
            k = head[a2]
        tr_cap[k] += bott
        if tr_cap[k] == 0:
            parent[k] = _ORPHAN
            ohead = (ohead - 1 + ocap) % ocap
            orph[ohead] = k
            ocount += 1
        flow += bott

        # adoption
        while ocount > 0:
            o = orph[ohead]
            ohead = (ohead + 1) % ocap
            ocount -= 1
            sink_side = is_sink[o]
            best_a = -1
            d_min = _INF_D
            for a0 in range(first[o], first[o + 1]):
                cap_in = rcap[a0] if sink_side else rcap[sister[a0]]
                if cap_in <= 0:
                    continue
                j = head[a0]
                if is_sink[j] != sink_side or parent[j] == _FREE:
                    continue
                d = 0
                jj = j
                while True:
                    if ts[jj] == time:
                        d += dist[jj]
                        break
                    pa = parent[jj]
                    d += 1
                    if pa == _TERMINAL:
                        ts[jj] = time
                        dist[jj] = 1
                        break
                    if pa == _ORPHAN:
                        d = _INF_D
                        break
                    jj = head[pa]
                if d < _INF_D:
                    if d < d_min:
                        best_a = a0
                        d_min = d
                    jj = j
                    while ts[jj] != time:
                        ts[jj] = time
                        dist[jj] = d
                        d -= 1
                        jj = head[parent[jj]]
            if best_a >= 0:
                parent[o] = best_a
                ts[o] = time
                dist[o] = d_min + 1
            else:
                parent[o] = _FREE
                for a0 in range(first[o], first[o + 1]):
                    j = head[a0]
                    if is_sink[j] != sink_side:
                        continue
                    pa = parent[j]
                    if pa == _FREE:
                        continue
                    cap_in = rcap[a0] if sink_side else rcap[sister[a0]]
                    if cap_in > 0:
                        _set_active(j, nxt, qstate)
                    if pa != _TERMINAL and pa != _ORPHAN and head[pa] == o:
                        parent[j] = _ORPHAN
                        orph[(ohead + ocount) % ocap] = j
                        ocount += 1
    return flow


@njit(cache=True, nogil=True)
def source_reachable(first, head, rcap, tr_cap):
    """Nodes reachable from the source in the residual graph (BFS, index order)."""
    n = tr_cap.shape[0]
    seen = np.zeros(n, np.bool_)
    queue = np.empty(n, np.int64)
    qt = 0
    for i in range(n):
        if tr_cap[i] > 0:
            seen[i] = True
            queue[qt] = i
            qt += 1
    qh = 0
    while qh < qt:
        i = queue[qh]
        qh += 1
        for a in range(first[i], first[i + 1]):
            j = head[a]
            if not seen[j] and rcap[a] > 0:
                seen[j] = True
                queue[qt] = j
                qt += 1
    return seen


# ---------------------------------------------------------------- GMM passes


@njit(cache=True, nogil=True)
def gmm_assign(x, means, inv_covs, offsets, active):
    """Hard-assign rows of ``x`` to the component of lowest negative log-density.

    ``offsets[k] = -log w_k + 0.5 log det S_k + 1.5 log 2 pi``; inactive
    components are skipped.  Returns ``(labels, cost)``.
    """
    n = x.shape[0]
    K = means.shape[0]
    labels = np.zeros(n, np.int64)
    cost = np.empty(n)
    for i in range(n):
        best = np.inf
        bk = 0
        for k in range(K):
            if not active[k]:
                continue
            d0 = x[i, 0] - means[k, 0]
            d1 = x[i, 1] - means[k, 1]
            d2 = x[i, 2] - means[k, 2]
            P = inv_covs[k]
            q = (d0 * (P[0, 0] * d0 + P[0, 1] * d1 + P[0, 2] * d2)
                 + d1 * (P[1, 0] * d0 + P[1, 1] * d1 + P[1, 2] * d2)
                 + d2 * (P[2, 0] * d0 + P[2, 1] * d1 + P[2, 2] * d2))
            c = offsets[k] + 0.5 * q
            if c < best:
                best = c
                bk = k
        labels[i] = bk
        cost[i] = best
    return labels, cost


@njit(cache=True, nogil=True)
def gmm_stats(x, labels, K):
    """Per-component counts, sums and scatter (uncentred second moments)."""
    counts = np.zeros(K)
    sums = np.zeros((K, 3))
    outer = np.zeros((K, 3, 3))
    for i in range(x.shape[0]):
        k = labels[i]
        counts[k] += 1.0
        for a in range(3):
            sums[k, a] += x[i, a]
            for b in range(3):
                outer[k, a, b] += x[i, a] * x[i, b]
    return counts, sums, outer


@njit(cache=True, nogil=True)
def nearest_center(x, centers):
    n = x.shape[0]
    labels = np.zeros(n, np.int64)
    for i in range(n):
        best = np.inf
        for k in range(centers.shape[0]):
            d = 0.0
            for a in range(3):
                t = x[i, a] - centers[k, a]
                d += t * t
            if d < best:
                best = d
                labels[i] = k
    return labels


@njit(cache=True, nogil=True)
def kmeanspp_seed(x, K, uniforms):
    """k-means++ seeding; ``uniforms`` supplies K draws in [0, 1)."""
    n = x.shape[0]
    centers = np.empty((K, 3))
    idx = min(int(uniforms[0] * n), n - 1)
    centers[0] = x[idx]
    d2 = np.empty(n)
    for i in range(n):
        s = 0.0
        for a in range(3):
            t = x[i, a] - centers[0, a]
            s += t * t
        d2[i] = s
    for k in range(1, K):
        total = d2.sum()
        if total <= 0.0:
            # fewer distinct points than K: repeat the first centre
            centers[k] = centers[0]
            continue
        target = uniforms[k] * total
        acc = 0.0
        idx = n - 1
        for i in range(n):
            acc += d2[i]
            if acc > target:
                idx = i
                break
        centers[k] = x[idx]
        for i in range(n):
            s = 0.0
            for a in range(3):
                t = x[i, a] - centers[k, a]
                s += t * t
            if s < d2[i]:
                d2[i] = s
    return centers


# ------------------------------------------------------------- rasterization


@njit(cache=True, nogil=True)
def _paint_hull(mask, u1, v1, r1, u2, v2, r2):
    H, W = mask.shape
    x0 = max(int(np.floor(min(u1 - r1, u2 - r2))), 0)
    x1 = min(int(np.ceil(max(u1 + r1, u2 + r2))), W - 1)
    y0 = max(int(np.floor(min(v1 - r1, v2 - r2))), 0)
    y1 = min(int(np.ceil(max(v1 + r1, v2 + r2))), H - 1)
    du = u2 - u1
    dv = v2 - v1
    dr = r2 - r1
    L2 = du * du + dv * dv
    L = np.sqrt(L2)
    nested = L <= abs(dr)
    if nested:
        # one disk contains the other
        if r2 > r1:
            cu, cv, cr = u2, v2, r2
        else:
            cu, cv, cr = u1, v1, r1
    else:
        slope = dr / np.sqrt(L2 - dr * dr)
    for y in range(y0, y1 + 1):
        for x in range(x0, x1 + 1):
            if nested:
                if (x - cu) ** 2 + (y - cv) ** 2 <= cr * cr:
                    mask[y, x] = True
                continue
            wu = x - u1
            wv = y - v1
            a = (wu * du + wv * dv) / L
            b = abs(wu * dv - wv * du) / L
            t = (a + slope * b) / L
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            gu = wu - t * du
            gv = wv - t * dv
            rt = r1 + t * dr
            if gu * gu + gv * gv <= rt * rt:
                mask[y, x] = True


@njit(cache=True, nogil=True)
def rasterize_capsules(u, v, r, valid, H, W):
    """Union of disks (u, v, r) with convex-hull bridges between consecutive valid samples."""
    mask = np.zeros((H, W), np.bool_)
    n = u.shape[0]
    for i in range(n):
        if not valid[i]:
            continue
        bridged = i + 1 < n and valid[i + 1]
        if bridged:
            _paint_hull(mask, u[i], v[i], r[i], u[i + 1], v[i + 1], r[i + 1])
        elif not (i > 0 and valid[i - 1]):
            _paint_hull(mask, u[i], v[i], r[i], u[i], v[i], r[i])
        # the pixel under the sample centre is always part of the silhouette
        if np.isfinite(u[i]) and np.isfinite(v[i]):
            cx = int(np.floor(u[i] + 0.5))
            cy = int(np.floor(v[i] + 0.5))
            if 0 <= cx < W and 0 <= cy < H:
                mask[cy, cx] = True
    return mask
