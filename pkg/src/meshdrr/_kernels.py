"""Compiled per-pixel loops for the l-buffer rasterizer.

Each kernel touches a disjoint block of rows, so callers may run blocks on
separate threads; per-pixel results never depend on how rows are split.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True, inline="always")
def _edge(xlo, ylo, xhi, yhi, flip, px, py):
    e = (xhi - xlo) * (py - ylo) - (yhi - ylo) * (px - xlo)
    return -e if flip else e


@njit(cache=True, nogil=True, inline="always")
def _owns(e, dx, dy):
    # strictly inside, or on an edge that the tie rule assigns to this triangle
    if e > 0.0:
        return True
    if e < 0.0:
        return False
    return dy > 0.0 or (dy == 0.0 and dx < 0.0)


@njit(cache=True, nogil=True)
def raster_band(row0, row1, sx, sy, depth_w, height, faces, fsign, ray_scale, K,
                frag_face, frag_z, frag_sign, frag_bary, count, overflow):
    H, W = ray_scale.shape
    ev = np.empty(3)
    dxs = np.empty(3)
    dys = np.empty(3)
    xlo = np.empty(3)
    ylo = np.empty(3)
    xhi = np.empty(3)
    yhi = np.empty(3)
    flips = np.empty(3, dtype=np.bool_)
    tv = np.empty(3, dtype=np.int64)
    slot = np.empty(3, dtype=np.int64)
    for f in range(faces.shape[0]):
        s = fsign[f]
        if s == 0:
            continue
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        xmin = min(sx[i0], sx[i1], sx[i2])
        xmax = max(sx[i0], sx[i1], sx[i2])
        ymin = min(sy[i0], sy[i1], sy[i2])
        ymax = max(sy[i0], sy[i1], sy[i2])
        c0 = max(int(math.ceil(xmin)), 0)
        c1 = min(int(math.floor(xmax)), W - 1)
        r0 = max(int(math.ceil(ymin)), row0)
        r1 = min(int(math.floor(ymax)), row1 - 1)
        if c0 > c1 or r0 > r1:
            continue
        area = (sx[i1] - sx[i0]) * (sy[i2] - sy[i0]) - (sy[i1] - sy[i0]) * (sx[i2] - sx[i0])
        if area == 0.0:
            continue
        # traverse counter-clockwise in screen space
        tv[0] = i0
        slot[0] = 0
        if area > 0.0:
            tv[1] = i1
            tv[2] = i2
            slot[1] = 1
            slot[2] = 2
        else:
            tv[1] = i2
            tv[2] = i1
            slot[1] = 2
            slot[2] = 1
        # edge e runs tv[e] -> tv[e+1]; evaluate from the lower vertex id so a
        # shared edge yields exactly negated values in both neighbours
        for e in range(3):
            a = tv[e]
            b = tv[(e + 1) % 3]
            if a < b:
                lo, hi, flips[e] = a, b, False
            else:
                lo, hi, flips[e] = b, a, True
            xlo[e] = sx[lo]
            ylo[e] = sy[lo]
            xhi[e] = sx[hi]
            yhi[e] = sy[hi]
            dxs[e] = -(sx[hi] - sx[lo]) if flips[e] else sx[hi] - sx[lo]
            dys[e] = -(sy[hi] - sy[lo]) if flips[e] else sy[hi] - sy[lo]
        for r in range(r0, r1 + 1):
            py = float(r)
            for c in range(c0, c1 + 1):
                px = float(c)
                inside = True
                for e in range(3):
                    ev[e] = _edge(xlo[e], ylo[e], xhi[e], yhi[e], flips[e], px, py)
                    if not _owns(ev[e], dxs[e], dys[e]):
                        inside = False
                        break
                if not inside:
                    continue
                tot = ev[0] + ev[1] + ev[2]
                if tot <= 0.0:
                    continue
                # screen barycentric of tv[k] is the edge opposite it
                la = ev[1] / tot
                lb = ev[2] / tot
                lc = ev[0] / tot
                qa = la / depth_w[tv[0]]
                qb = lb / depth_w[tv[1]]
                qc = lc / depth_w[tv[2]]
                qs = qa + qb + qc
                ba = qa / qs
                bb = qb / qs
                bc = qc / qs
                z = ray_scale[r, c] * (ba * height[tv[0]] + bb * height[tv[1]] + bc * height[tv[2]])
                n = count[r, c]
                if n >= K:
                    overflow[r, c] = True
                    continue
                frag_face[r, c, n] = f
                frag_z[r, c, n] = z
                frag_sign[r, c, n] = s
                frag_bary[r, c, n, slot[0]] = ba
                frag_bary[r, c, n, slot[1]] = bb
                frag_bary[r, c, n, slot[2]] = bc
                count[r, c] = n + 1


@njit(cache=True, nogil=True)
def resolve_band(row0, row1, frag_face, frag_z, frag_sign, count, values, sign_sum):
    K = frag_face.shape[2]
    order = np.empty(K, dtype=np.int64)
    W = count.shape[1]
    for r in range(row0, row1):
        for c in range(W):
            n = count[r, c]
            # insertion sort by face id: a fixed reduction order
            for k in range(n):
                order[k] = k
            for k in range(1, n):
                key = order[k]
                j = k - 1
                while j >= 0 and frag_face[r, c, order[j]] > frag_face[r, c, key]:
                    order[j + 1] = order[j]
                    j -= 1
                order[j + 1] = key
            acc = 0.0
            ss = 0
            for k in range(n):
                o = order[k]
                acc += frag_sign[r, c, o] * frag_z[r, c, o]
                ss += frag_sign[r, c, o]
            values[r, c] = acc
            sign_sum[r, c] = ss


@njit(cache=True, nogil=True)
def repair_invalid(values, invalid):
    H, W = values.shape
    out = values.copy()
    repaired = np.zeros((H, W), dtype=np.bool_)
    has_valid = False
    for r in range(H):
        for c in range(W):
            if not invalid[r, c]:
                has_valid = True
    for r in range(H):
        for c in range(W):
            if not invalid[r, c]:
                continue
            repaired[r, c] = True
            out[r, c] = 0.0
            if not has_valid:
                continue
            found = False
            for rad in range(1, max(H, W)):
                for rr in range(r - rad, r + rad + 1):
                    if rr < 0 or rr >= H:
                        continue
                    full = rr == r - rad or rr == r + rad
                    cc = c - rad
                    while cc <= c + rad:
                        if 0 <= cc < W and not invalid[rr, cc]:
                            out[r, c] = values[rr, cc]
                            found = True
                            break
                        cc = cc + 1 if full else cc + 2 * rad
                    if found:
                        break
                if found:
                    break
    return out, repaired


@njit(cache=True, nogil=True)
def backward_band(row0, row1, frag_face, frag_sign, frag_bary, count, grad_mask, upstream,
                  faces, face_normals, ray_dir, out):
    W = count.shape[1]
    for r in range(row0, row1):
        for c in range(W):
            if not grad_mask[r, c]:
                continue
            g = upstream[r, c]
            if g == 0.0:
                continue
            d0 = ray_dir[r, c, 0]
            d1 = ray_dir[r, c, 1]
            d2 = ray_dir[r, c, 2]
            for k in range(count[r, c]):
                f = frag_face[r, c, k]
                n0 = face_normals[f, 0]
                n1 = face_normals[f, 1]
                n2 = face_normals[f, 2]
                nd = n0 * d0 + n1 * d1 + n2 * d2
                if nd == 0.0:
                    continue
                # distance along the ray to the face plane moves by b_i n/(n.d) per unit vertex motion
                coef = g * frag_sign[r, c, k] / nd
                for s in range(3):
                    v = faces[f, s]
                    wgt = coef * frag_bary[r, c, k, s]
                    out[v, 0] += wgt * n0
                    out[v, 1] += wgt * n1
                    out[v, 2] += wgt * n2
