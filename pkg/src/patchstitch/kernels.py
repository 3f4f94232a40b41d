"""Hot loops: exact nearest-neighbour search and batched 3x3 eigensolves.

Every public function dispatches on :func:`patchstitch._accel.get_backend`.
The numba path walks a kd-tree; the numpy path is a blocked brute-force scan.
Squared distances are accumulated as ``(dx*dx + dy*dy) + dz*dz`` on both
paths so neighbour sets (including ties, broken by ascending index) agree
bit for bit.
"""

import math
from typing import NamedTuple

import numpy as np

from . import _accel
from ._accel import njit

LEAF_SIZE = 16
_BLOCK = 512

LABEL_ANY = 0
LABEL_SAME = 1
LABEL_OTHER = 2


class TreeArrays(NamedTuple):
    points: np.ndarray
    perm: np.ndarray
    start: np.ndarray
    end: np.ndarray
    left: np.ndarray
    right: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------


@njit
def _build_tree_nb(points, leaf_size):
    n = points.shape[0]
    max_nodes = 2 * n + 1
    perm = np.arange(n)
    start = np.empty(max_nodes, np.int64)
    end = np.empty(max_nodes, np.int64)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    lo = np.empty((max_nodes, 3))
    hi = np.empty((max_nodes, 3))
    stack = np.empty(max_nodes, np.int64)
    start[0] = 0
    end[0] = n
    n_nodes = 1
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        e = end[node]
        for d in range(3):
            lo[node, d] = np.inf
            hi[node, d] = -np.inf
        for t in range(s, e):
            j = perm[t]
            for d in range(3):
                v = points[j, d]
                if v < lo[node, d]:
                    lo[node, d] = v
                if v > hi[node, d]:
                    hi[node, d] = v
        if e - s <= leaf_size:
            continue
        dim = 0
        ext = hi[node, 0] - lo[node, 0]
        for d in range(1, 3):
            if hi[node, d] - lo[node, d] > ext:
                ext = hi[node, d] - lo[node, d]
                dim = d
        sub = perm[s:e].copy()
        keys = np.empty(e - s)
        for t in range(e - s):
            keys[t] = points[sub[t], dim]
        order = np.argsort(keys, kind="mergesort")
        for t in range(e - s):
            perm[s + t] = sub[order[t]]
        mid = s + (e - s) // 2
        a = n_nodes
        b = n_nodes + 1
        n_nodes += 2
        start[a] = s
        end[a] = mid
        start[b] = mid
        end[b] = e
        left[node] = a
        right[node] = b
        stack[sp] = a
        sp += 1
        stack[sp] = b
        sp += 1
    return (perm, start[:n_nodes].copy(), end[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), lo[:n_nodes].copy(), hi[:n_nodes].copy())


@njit
def _box_d2(q0, q1, q2, lo, hi, node):
    d = 0.0
    v = lo[node, 0] - q0
    if v > 0.0:
        d += v * v
    else:
        v = q0 - hi[node, 0]
        if v > 0.0:
            d += v * v
    v = lo[node, 1] - q1
    if v > 0.0:
        d += v * v
    else:
        v = q1 - hi[node, 1]
        if v > 0.0:
            d += v * v
    v = lo[node, 2] - q2
    if v > 0.0:
        d += v * v
    else:
        v = q2 - hi[node, 2]
        if v > 0.0:
            d += v * v
    return d


@njit
def _accept(j, qi, self_idx, labels, qlabels, label_mode, normals, qnormals, theta):
    if j == self_idx[qi]:
        return False
    if label_mode == 1 and labels[j] != qlabels[qi]:
        return False
    if label_mode == 2 and labels[j] == qlabels[qi]:
        return False
    if theta > 0.0:
        c = (qnormals[qi, 0] * normals[j, 0] + qnormals[qi, 1] * normals[j, 1]) + qnormals[qi, 2] * normals[j, 2]
        if c > 1.0:
            c = 1.0
        elif c < -1.0:
            c = -1.0
        if not (math.acos(c) < theta):
            return False
    return True


@njit
def _knn_tree_nb(points, perm, start, end, left, right, lo, hi, queries, k,
                 self_idx, labels, qlabels, label_mode, normals, qnormals, theta):
    nq = queries.shape[0]
    out_i = np.full((nq, k), -1, np.int64)
    out_d = np.full((nq, k), np.inf)
    stack = np.empty(start.shape[0] + 1, np.int64)
    for qi in range(nq):
        q0 = queries[qi, 0]
        q1 = queries[qi, 1]
        q2 = queries[qi, 2]
        cnt = 0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if cnt == k and _box_d2(q0, q1, q2, lo, hi, node) > out_d[qi, k - 1]:
                continue
            if left[node] < 0:
                for t in range(start[node], end[node]):
                    j = perm[t]
                    if not _accept(j, qi, self_idx, labels, qlabels, label_mode, normals, qnormals, theta):
                        continue
                    dx = q0 - points[j, 0]
                    dy = q1 - points[j, 1]
                    dz = q2 - points[j, 2]
                    d = (dx * dx + dy * dy) + dz * dz
                    if cnt == k:
                        wd = out_d[qi, k - 1]
                        if d > wd or (d == wd and j > out_i[qi, k - 1]):
                            continue
                        pos = k - 1
                    else:
                        pos = cnt
                        cnt += 1
                    while pos > 0 and (d < out_d[qi, pos - 1] or (d == out_d[qi, pos - 1] and j < out_i[qi, pos - 1])):
                        out_d[qi, pos] = out_d[qi, pos - 1]
                        out_i[qi, pos] = out_i[qi, pos - 1]
                        pos -= 1
                    out_d[qi, pos] = d
                    out_i[qi, pos] = j
            else:
                a = left[node]
                b = right[node]
                da = _box_d2(q0, q1, q2, lo, hi, a)
                db = _box_d2(q0, q1, q2, lo, hi, b)
                if da <= db:
                    stack[sp] = b
                    stack[sp + 1] = a
                else:
                    stack[sp] = a
                    stack[sp + 1] = b
                sp += 2
    return out_i, out_d


@njit
def _radius_tree_nb(points, perm, start, end, left, right, lo, hi, queries, r2):
    nq = queries.shape[0]
    offsets = np.zeros(nq + 1, np.int64)
    buf = np.empty(max(16, 4 * nq), np.int64)
    fill = 0
    stack = np.empty(start.shape[0] + 1, np.int64)
    for qi in range(nq):
        q0 = queries[qi, 0]
        q1 = queries[qi, 1]
        q2 = queries[qi, 2]
        seg = fill
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_d2(q0, q1, q2, lo, hi, node) > r2:
                continue
            if left[node] < 0:
                for t in range(start[node], end[node]):
                    j = perm[t]
                    dx = q0 - points[j, 0]
                    dy = q1 - points[j, 1]
                    dz = q2 - points[j, 2]
                    if (dx * dx + dy * dy) + dz * dz <= r2:
                        if fill == buf.shape[0]:
                            nb = np.empty(2 * buf.shape[0], np.int64)
                            nb[:fill] = buf[:fill]
                            buf = nb
                        buf[fill] = j
                        fill += 1
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
        buf[seg:fill] = np.sort(buf[seg:fill])
        offsets[qi + 1] = fill
    return offsets, buf[:fill].copy()


@njit
def _count_labels_tree_nb(points, perm, start, end, left, right, lo, hi, queries, r2, labels, n_labels):
    nq = queries.shape[0]
    counts = np.zeros(nq, np.int64)
    seen = np.zeros(n_labels, np.bool_)
    stack = np.empty(start.shape[0] + 1, np.int64)
    for qi in range(nq):
        q0 = queries[qi, 0]
        q1 = queries[qi, 1]
        q2 = queries[qi, 2]
        seen[:] = False
        c = 0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0 and c < n_labels:
            sp -= 1
            node = stack[sp]
            if _box_d2(q0, q1, q2, lo, hi, node) > r2:
                continue
            if left[node] < 0:
                for t in range(start[node], end[node]):
                    j = perm[t]
                    if seen[labels[j]]:
                        continue
                    dx = q0 - points[j, 0]
                    dy = q1 - points[j, 1]
                    dz = q2 - points[j, 2]
                    if (dx * dx + dy * dy) + dz * dz <= r2:
                        seen[labels[j]] = True
                        c += 1
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
        counts[qi] = c
    return counts


@njit
def _unit_cross_eigvec(a00, a01, a02, a11, a12, a22, lam):
    r00 = a00 - lam
    r11 = a11 - lam
    r22 = a22 - lam
    # rows: (r00, a01, a02), (a01, r11, a12), (a02, a12, r22)
    c0x = a01 * a12 - a02 * r11
    c0y = a02 * a01 - r00 * a12
    c0z = r00 * r11 - a01 * a01
    c1x = a01 * r22 - a02 * a12
    c1y = a02 * a02 - r00 * r22
    c1z = r00 * a12 - a01 * a02
    c2x = r11 * r22 - a12 * a12
    c2y = a12 * a02 - a01 * r22
    c2z = a01 * a12 - r11 * a02
    n0 = (c0x * c0x + c0y * c0y) + c0z * c0z
    n1 = (c1x * c1x + c1y * c1y) + c1z * c1z
    n2 = (c2x * c2x + c2y * c2y) + c2z * c2z
    if n0 >= n1 and n0 >= n2:
        x, y, z, nn = c0x, c0y, c0z, n0
    elif n1 >= n2:
        x, y, z, nn = c1x, c1y, c1z, n1
    else:
        x, y, z, nn = c2x, c2y, c2z, n2
    return x, y, z, nn


@njit
def _sym3_eigh_nb(C):
    n = C.shape[0]
    w = np.empty((n, 3))
    V = np.empty((n, 3, 3))
    for i in range(n):
        a00 = C[i, 0, 0]
        a01 = 0.5 * (C[i, 0, 1] + C[i, 1, 0])
        a02 = 0.5 * (C[i, 0, 2] + C[i, 2, 0])
        a11 = C[i, 1, 1]
        a12 = 0.5 * (C[i, 1, 2] + C[i, 2, 1])
        a22 = C[i, 2, 2]
        q = (a00 + a11 + a22) / 3.0
        b00 = a00 - q
        b11 = a11 - q
        b22 = a22 - q
        p1 = (a01 * a01 + a02 * a02) + a12 * a12
        p2 = ((b00 * b00 + b11 * b11) + b22 * b22) + 2.0 * p1
        p = math.sqrt(p2 / 6.0)
        scale = max(abs(q), p)
        if p <= 1e-300 or p <= 1e-15 * scale:
            lmin = q
            vx, vy, vz, nn = 0.0, 0.0, 1.0, 1.0
        else:
            det = (b00 * (b11 * b22 - a12 * a12) - a01 * (a01 * b22 - a12 * a02)) + a02 * (a01 * a12 - b11 * a02)
            r = det / (2.0 * p * p * p)
            if r > 1.0:
                r = 1.0
            elif r < -1.0:
                r = -1.0
            phi = math.acos(r) / 3.0
            lmin = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
            vx, vy, vz, nn = _unit_cross_eigvec(a00, a01, a02, a11, a12, a22, lmin)
            if nn <= (1e-30 * p) * (p * p * p):
                # repeated smallest eigenvalue: take any vector orthogonal to the dominant row
                rx, ry, rz = a00 - lmin, a01, a02
                sx, sy, sz = a01, a11 - lmin, a12
                tx, ty, tz = a02, a12, a22 - lmin
                nr = (rx * rx + ry * ry) + rz * rz
                ns = (sx * sx + sy * sy) + sz * sz
                nt = (tx * tx + ty * ty) + tz * tz
                if ns > nr and ns >= nt:
                    rx, ry, rz, nr = sx, sy, sz, ns
                elif nt > nr:
                    rx, ry, rz, nr = tx, ty, tz, nt
                if nr <= 0.0:
                    vx, vy, vz, nn = 0.0, 0.0, 1.0, 1.0
                else:
                    ax, ay, az = abs(rx), abs(ry), abs(rz)
                    if ax <= ay and ax <= az:
                        vx, vy, vz = 0.0, -rz, ry
                    elif ay <= az:
                        vx, vy, vz = rz, 0.0, -rx
                    else:
                        vx, vy, vz = -ry, rx, 0.0
                    nn = (vx * vx + vy * vy) + vz * vz
        inv = 1.0 / math.sqrt(nn)
        vx *= inv
        vy *= inv
        vz *= inv
        # orthonormal complement (u, t) of v
        ax, ay, az = abs(vx), abs(vy), abs(vz)
        if ax <= ay and ax <= az:
            ux, uy, uz = 0.0, -vz, vy
        elif ay <= az:
            ux, uy, uz = vz, 0.0, -vx
        else:
            ux, uy, uz = -vy, vx, 0.0
        inv = 1.0 / math.sqrt((ux * ux + uy * uy) + uz * uz)
        ux *= inv
        uy *= inv
        uz *= inv
        tx = vy * uz - vz * uy
        ty = vz * ux - vx * uz
        tz = vx * uy - vy * ux
        Aux = (a00 * ux + a01 * uy) + a02 * uz
        Auy = (a01 * ux + a11 * uy) + a12 * uz
        Auz = (a02 * ux + a12 * uy) + a22 * uz
        Atx = (a00 * tx + a01 * ty) + a02 * tz
        Aty = (a01 * tx + a11 * ty) + a12 * tz
        Atz = (a02 * tx + a12 * ty) + a22 * tz
        Avx = (a00 * vx + a01 * vy) + a02 * vz
        Avy = (a01 * vx + a11 * vy) + a12 * vz
        Avz = (a02 * vx + a12 * vy) + a22 * vz
        suu = (ux * Aux + uy * Auy) + uz * Auz
        sut = (ux * Atx + uy * Aty) + uz * Atz
        stt = (tx * Atx + ty * Aty) + tz * Atz
        lmin = (vx * Avx + vy * Avy) + vz * Avz
        ang = 0.5 * math.atan2(2.0 * sut, suu - stt)
        c = math.cos(ang)
        s = math.sin(ang)
        half = 0.5 * (suu - stt)
        rad = math.sqrt(half * half + sut * sut)
        mean = 0.5 * (suu + stt)
        w[i, 0] = lmin
        w[i, 1] = mean - rad
        w[i, 2] = mean + rad
        V[i, 0, 0] = vx
        V[i, 1, 0] = vy
        V[i, 2, 0] = vz
        V[i, 0, 1] = -s * ux + c * tx
        V[i, 1, 1] = -s * uy + c * ty
        V[i, 2, 1] = -s * uz + c * tz
        V[i, 0, 2] = c * ux + s * tx
        V[i, 1, 2] = c * uy + s * ty
        V[i, 2, 2] = c * uz + s * tz
    return w, V


# --------------------------------------------------------------------------
# numpy fallbacks
# --------------------------------------------------------------------------


def _sqdist_block(queries, points):
    dx = queries[:, None, 0] - points[None, :, 0]
    dy = queries[:, None, 1] - points[None, :, 1]
    dz = queries[:, None, 2] - points[None, :, 2]
    return (dx * dx + dy * dy) + dz * dz


def _knn_np(points, queries, k, self_idx, labels, qlabels, label_mode, normals, qnormals, theta):
    nq = queries.shape[0]
    n = points.shape[0]
    out_i = np.full((nq, k), -1, np.int64)
    out_d = np.full((nq, k), np.inf)
    cols = np.arange(n)
    kk = min(k, n)
    for s in range(0, nq, _BLOCK):
        e = min(nq, s + _BLOCK)
        d2 = _sqdist_block(queries[s:e], points)
        bad = cols[None, :] == self_idx[s:e, None]
        if label_mode == LABEL_SAME:
            bad |= labels[None, :] != qlabels[s:e, None]
        elif label_mode == LABEL_OTHER:
            bad |= labels[None, :] == qlabels[s:e, None]
        if theta > 0.0:
            c = (qnormals[s:e, None, 0] * normals[None, :, 0] + qnormals[s:e, None, 1] * normals[None, :, 1]) \
                + qnormals[s:e, None, 2] * normals[None, :, 2]
            bad |= ~(np.arccos(np.clip(c, -1.0, 1.0)) < theta)
        d2 = np.where(bad, np.inf, d2)
        order = np.argsort(d2, axis=1, kind="stable")[:, :kk]
        dd = np.take_along_axis(d2, order, axis=1)
        order = np.where(np.isinf(dd), -1, order)
        out_i[s:e, :kk] = order
        out_d[s:e, :kk] = dd
    return out_i, out_d


def _radius_np(points, queries, r2):
    offsets = [0]
    chunks = []
    for s in range(0, queries.shape[0], _BLOCK):
        d2 = _sqdist_block(queries[s:s + _BLOCK], points)
        for row in d2:
            hit = np.flatnonzero(row <= r2)
            chunks.append(hit)
            offsets.append(offsets[-1] + hit.size)
    idx = np.concatenate(chunks) if chunks else np.empty(0, np.int64)
    return np.asarray(offsets, np.int64), idx.astype(np.int64)


def _count_labels_np(points, queries, r2, labels, n_labels):
    counts = np.zeros(queries.shape[0], np.int64)
    for s in range(0, queries.shape[0], _BLOCK):
        within = _sqdist_block(queries[s:s + _BLOCK], points) <= r2
        for lab in range(n_labels):
            counts[s:s + _BLOCK] += within[:, labels == lab].any(axis=1)
    return counts


def _unit_cross_eigvec_np(a00, a01, a02, a11, a12, a22, lam):
    r00 = a00 - lam
    r11 = a11 - lam
    r22 = a22 - lam
    c0 = np.stack([a01 * a12 - a02 * r11, a02 * a01 - r00 * a12, r00 * r11 - a01 * a01], -1)
    c1 = np.stack([a01 * r22 - a02 * a12, a02 * a02 - r00 * r22, r00 * a12 - a01 * a02], -1)
    c2 = np.stack([r11 * r22 - a12 * a12, a12 * a02 - a01 * r22, a01 * a12 - r11 * a02], -1)
    n0 = (c0[:, 0] ** 2 + c0[:, 1] ** 2) + c0[:, 2] ** 2
    n1 = (c1[:, 0] ** 2 + c1[:, 1] ** 2) + c1[:, 2] ** 2
    n2 = (c2[:, 0] ** 2 + c2[:, 1] ** 2) + c2[:, 2] ** 2
    pick0 = (n0 >= n1) & (n0 >= n2)
    pick1 = ~pick0 & (n1 >= n2)
    v = np.where(pick0[:, None], c0, np.where(pick1[:, None], c1, c2))
    nn = np.where(pick0, n0, np.where(pick1, n1, n2))
    return v, nn


def _orth(v):
    """A vector orthogonal to each row of ``v`` (not normalized)."""
    a = np.abs(v)
    zero = np.zeros(v.shape[0])
    c0 = np.stack([zero, -v[:, 2], v[:, 1]], -1)
    c1 = np.stack([v[:, 2], zero, -v[:, 0]], -1)
    c2 = np.stack([-v[:, 1], v[:, 0], zero], -1)
    p0 = (a[:, 0] <= a[:, 1]) & (a[:, 0] <= a[:, 2])
    p1 = ~p0 & (a[:, 1] <= a[:, 2])
    return np.where(p0[:, None], c0, np.where(p1[:, None], c1, c2))


def _sym3_eigh_np(C):
    a00 = C[:, 0, 0]
    a01 = 0.5 * (C[:, 0, 1] + C[:, 1, 0])
    a02 = 0.5 * (C[:, 0, 2] + C[:, 2, 0])
    a11 = C[:, 1, 1]
    a12 = 0.5 * (C[:, 1, 2] + C[:, 2, 1])
    a22 = C[:, 2, 2]
    q = (a00 + a11 + a22) / 3.0
    b00, b11, b22 = a00 - q, a11 - q, a22 - q
    p1 = (a01 * a01 + a02 * a02) + a12 * a12
    p2 = ((b00 * b00 + b11 * b11) + b22 * b22) + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    iso = (p <= 1e-300) | (p <= 1e-15 * np.maximum(np.abs(q), p))
    ps = np.where(iso, 1.0, p)
    det = (b00 * (b11 * b22 - a12 * a12) - a01 * (a01 * b22 - a12 * a02)) + a02 * (a01 * a12 - b11 * a02)
    r = np.clip(det / (2.0 * ps * ps * ps), -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    lmin = np.where(iso, q, q + 2.0 * ps * np.cos(phi + 2.0 * np.pi / 3.0))
    v, nn = _unit_cross_eigvec_np(a00, a01, a02, a11, a12, a22, lmin)
    rep = ~iso & (nn <= (1e-30 * ps) * (ps * ps * ps))
    if rep.any():
        rows = np.stack([np.stack([a00 - lmin, a01, a02], -1),
                         np.stack([a01, a11 - lmin, a12], -1),
                         np.stack([a02, a12, a22 - lmin], -1)], 1)
        rn = (rows ** 2).sum(-1)
        dom = rows[np.arange(rows.shape[0]), np.argmax(rn, axis=1)]
        alt = _orth(dom)
        alt = np.where((rn.max(axis=1) <= 0.0)[:, None], np.array([0.0, 0.0, 1.0]), alt)
        v = np.where(rep[:, None], alt, v)
    v = np.where(iso[:, None], np.array([0.0, 0.0, 1.0]), v)
    v = v / np.sqrt((v[:, 0] ** 2 + v[:, 1] ** 2) + v[:, 2] ** 2)[:, None]
    u = _orth(v)
    u = u / np.sqrt((u[:, 0] ** 2 + u[:, 1] ** 2) + u[:, 2] ** 2)[:, None]
    t = np.cross(v, u)
    A = np.stack([np.stack([a00, a01, a02], -1), np.stack([a01, a11, a12], -1), np.stack([a02, a12, a22], -1)], 1)
    Au = np.einsum("nij,nj->ni", A, u)
    At = np.einsum("nij,nj->ni", A, t)
    Av = np.einsum("nij,nj->ni", A, v)
    suu = (u * Au).sum(-1)
    sut = (u * At).sum(-1)
    stt = (t * At).sum(-1)
    lmin = (v * Av).sum(-1)
    ang = 0.5 * np.arctan2(2.0 * sut, suu - stt)
    c, s = np.cos(ang)[:, None], np.sin(ang)[:, None]
    half = 0.5 * (suu - stt)
    rad = np.sqrt(half * half + sut * sut)
    mean = 0.5 * (suu + stt)
    w = np.stack([lmin, mean - rad, mean + rad], -1)
    V = np.stack([v, -s * u + c * t, c * u + s * t], -1)
    return w, V


# --------------------------------------------------------------------------
# dispatching entry points
# --------------------------------------------------------------------------


def build_tree(points):
    points = np.ascontiguousarray(points, dtype=np.float64)
    if _accel.get_backend() == "numba":
        return TreeArrays(points, *_build_tree_nb(points, LEAF_SIZE))
    return TreeArrays(points, *(None,) * 7)


def _filters(nq, n, self_idx, labels, qlabels, normals, qnormals):
    self_idx = np.full(nq, -1, np.int64) if self_idx is None else np.ascontiguousarray(self_idx, np.int64)
    labels = np.zeros(n, np.int64) if labels is None else np.ascontiguousarray(labels, np.int64)
    qlabels = np.zeros(nq, np.int64) if qlabels is None else np.ascontiguousarray(qlabels, np.int64)
    normals = np.zeros((1, 3)) if normals is None else np.ascontiguousarray(normals, np.float64)
    qnormals = np.zeros((1, 3)) if qnormals is None else np.ascontiguousarray(qnormals, np.float64)
    return self_idx, labels, qlabels, normals, qnormals


def knn(tree, queries, k, *, self_idx=None, labels=None, qlabels=None, label_mode=LABEL_ANY,
        normals=None, qnormals=None, theta=0.0):
    """k nearest neighbours of each query row, with optional filters.

    Returns ``(idx, d2)`` of shape ``(Q, k)``, ordered by (distance, index).
    Slots without an admissible candidate hold ``-1`` / ``inf``.

    ``self_idx[q]`` is excluded from query ``q``'s results. ``label_mode``
    restricts candidates to the query's own label (``LABEL_SAME``) or to other
    labels (``LABEL_OTHER``). With ``theta > 0`` (radians), a candidate ``j`` is
    admissible only if ``arccos(clip(qnormals[q] . normals[j])) < theta``.
    """
    queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    nq, n = queries.shape[0], tree.points.shape[0]
    if theta > 0.0 and (normals is None or qnormals is None):
        raise ValueError("angular filter needs normals and qnormals")
    args = _filters(nq, n, self_idx, labels, qlabels, normals, qnormals)
    if _accel.get_backend() == "numba" and tree.perm is not None:
        return _knn_tree_nb(tree.points, tree.perm, tree.start, tree.end, tree.left, tree.right,
                            tree.lo, tree.hi, queries, int(k), args[0], args[1], args[2], int(label_mode),
                            args[3], args[4], float(theta))
    return _knn_np(tree.points, queries, int(k), args[0], args[1], args[2], int(label_mode),
                   args[3], args[4], float(theta))


def radius(tree, queries, r):
    """All indices within distance ``r`` (inclusive) of each query, CSR form.

    Returns ``(offsets, idx)``; query ``q``'s hits are
    ``idx[offsets[q]:offsets[q + 1]]`` in ascending index order.
    """
    queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    r2 = float(r) * float(r)
    if _accel.get_backend() == "numba" and tree.perm is not None:
        return _radius_tree_nb(tree.points, tree.perm, tree.start, tree.end, tree.left, tree.right,
                               tree.lo, tree.hi, queries, r2)
    return _radius_np(tree.points, queries, r2)


def count_labels_within(tree, queries, r, labels, n_labels):
    """Number of distinct labels having a point within ``r`` of each query."""
    queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    labels = np.ascontiguousarray(labels, np.int64)
    r2 = float(r) * float(r)
    if _accel.get_backend() == "numba" and tree.perm is not None:
        return _count_labels_tree_nb(tree.points, tree.perm, tree.start, tree.end, tree.left, tree.right,
                                     tree.lo, tree.hi, queries, r2, labels, int(n_labels))
    return _count_labels_np(tree.points, queries, r2, labels, int(n_labels))


def sym3_eigh(C):
    """Closed-form eigen-decomposition of a stack of symmetric 3x3 matrices.

    Returns ``(w, V)``: eigenvalues ascending ``(n, 3)`` and unit eigenvectors
    as columns ``(n, 3, 3)``. The smallest eigenvector comes from cross
    products of rows of ``C - lambda_min I``; the remaining pair is resolved
    by a 2x2 rotation in its orthogonal complement, which stays well defined
    when the two largest eigenvalues coincide.
    """
    C = np.ascontiguousarray(C, dtype=np.float64).reshape(-1, 3, 3)
    if _accel.get_backend() == "numba":
        return _sym3_eigh_nb(C)
    return _sym3_eigh_np(C)
