"""Compiled ray-marching kernels.

Every ray is sampled at the same camera depths ``zs`` (see
:func:`renderer.sample_depths`).

Scene grids are packed as ``(nx, ny, nz, 4)``: channel 0 holds the
occupancy logit, channels 1..3 the RGB color. Grid nodes sit on the bounds
corners, so node ``i`` along x is at ``bmin[0] + i * spacing[0]``.

Pose derivatives use the tangent ordering ``(wx, wy, wz, vx, vy, vz)`` with
rotation applied about the camera center in world coordinates; a world
sample ``p = t + y`` therefore moves by ``w x y + v``.
"""
import math

import numpy as np
from numba import njit

T_STOP = 1e-12


@njit(cache=True)
def locate(p0, p1, p2, bmin, inv_sp, nx, ny, nz):
    """Cell index and fractional offsets of a world point; ix < 0 when outside."""
    u0 = (p0 - bmin[0]) * inv_sp[0]
    u1 = (p1 - bmin[1]) * inv_sp[1]
    u2 = (p2 - bmin[2]) * inv_sp[2]
    if u0 < 0.0 or u1 < 0.0 or u2 < 0.0 or u0 > nx - 1 or u1 > ny - 1 or u2 > nz - 1:
        return -1, 0, 0, 0.0, 0.0, 0.0
    i = min(int(u0), nx - 2)
    j = min(int(u1), ny - 2)
    k = min(int(u2), nz - 2)
    return i, j, k, u0 - i, u1 - j, u2 - k


@njit(cache=True)
def trilinear(grid, i, j, k, fx, fy, fz, out, grad, inv_sp, want_grad):
    """Interpolate all channels; ``grad[c, axis]`` is d(channel)/d(world axis)."""
    nc = grid.shape[3]
    for c in range(nc):
        out[c] = 0.0
        if want_grad:
            grad[c, 0] = 0.0
            grad[c, 1] = 0.0
            grad[c, 2] = 0.0
    for a in range(2):
        wx = fx if a else 1.0 - fx
        sx = 1.0 if a else -1.0
        for b in range(2):
            wy = fy if b else 1.0 - fy
            sy = 1.0 if b else -1.0
            for d in range(2):
                wz = fz if d else 1.0 - fz
                sz = 1.0 if d else -1.0
                w = wx * wy * wz
                for c in range(nc):
                    v = grid[i + a, j + b, k + d, c]
                    out[c] += w * v
                    if want_grad:
                        grad[c, 0] += sx * wy * wz * v
                        grad[c, 1] += wx * sy * wz * v
                        grad[c, 2] += wx * wy * sz * v
    if want_grad:
        for c in range(nc):
            grad[c, 0] *= inv_sp[0]
            grad[c, 1] *= inv_sp[1]
            grad[c, 2] *= inv_sp[2]


@njit(cache=True, inline="always")
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def render_rays(grid, skip, bmin, inv_sp, R, t, dirs, zs, bg, min_weight, want_jac,
                rgb_out, depth_out, wsum_out, jac_out):
    """March every ray; optionally accumulate the (4, 6) output Jacobian.

    ``jac_out[r]`` rows are d(r, g, b, depth)/d(tangent).
    """
    nx, ny, nz = grid.shape[0], grid.shape[1], grid.shape[2]
    n_samples = zs.shape[0]
    vals = np.empty(4)
    grads = np.empty((4, 3))
    dT = np.empty(6)
    dA = np.empty((3, 6))
    dW = np.empty(6)
    dZ = np.empty(6)
    dl = np.empty(6)
    dwk = np.empty(6)
    for r in range(dirs.shape[0]):
        d0 = R[0, 0] * dirs[r, 0] + R[0, 1] * dirs[r, 1] + R[0, 2] * dirs[r, 2]
        d1 = R[1, 0] * dirs[r, 0] + R[1, 1] * dirs[r, 1] + R[1, 2] * dirs[r, 2]
        d2 = R[2, 0] * dirs[r, 0] + R[2, 1] * dirs[r, 1] + R[2, 2] * dirs[r, 2]
        T = 1.0
        A0 = 0.0
        A1 = 0.0
        A2 = 0.0
        W = 0.0
        Z = 0.0
        if want_jac:
            for q in range(6):
                dT[q] = 0.0
                dW[q] = 0.0
                dZ[q] = 0.0
                dA[0, q] = 0.0
                dA[1, q] = 0.0
                dA[2, q] = 0.0
        for s in range(n_samples):
            z = zs[s]
            y0 = d0 * z
            y1 = d1 * z
            y2 = d2 * z
            i, j, k, fx, fy, fz = locate(t[0] + y0, t[1] + y1, t[2] + y2, bmin, inv_sp, nx, ny, nz)
            if i < 0 or skip[i, j, k]:
                continue
            trilinear(grid, i, j, k, fx, fy, fz, vals, grads, inv_sp, want_jac)
            alpha = _sigmoid(vals[0])
            w = alpha * T
            A0 += w * vals[1]
            A1 += w * vals[2]
            A2 += w * vals[3]
            W += w
            Z += w * z
            if want_jac:
                da = alpha * (1.0 - alpha)
                g0 = grads[0, 0]
                g1 = grads[0, 1]
                g2 = grads[0, 2]
                # d(logit)/d(tangent) = (y x grad, grad)
                dl[0] = y1 * g2 - y2 * g1
                dl[1] = y2 * g0 - y0 * g2
                dl[2] = y0 * g1 - y1 * g0
                dl[3] = g0
                dl[4] = g1
                dl[5] = g2
                for q in range(6):
                    dalpha = da * dl[q]
                    dwk[q] = dalpha * T + alpha * dT[q]
                    dW[q] += dwk[q]
                    dZ[q] += dwk[q] * z
                    dT[q] = dT[q] * (1.0 - alpha) - T * dalpha
                for c in range(3):
                    g0 = grads[c + 1, 0]
                    g1 = grads[c + 1, 1]
                    g2 = grads[c + 1, 2]
                    cv = vals[c + 1]
                    dA[c, 0] += dwk[0] * cv + w * (y1 * g2 - y2 * g1)
                    dA[c, 1] += dwk[1] * cv + w * (y2 * g0 - y0 * g2)
                    dA[c, 2] += dwk[2] * cv + w * (y0 * g1 - y1 * g0)
                    dA[c, 3] += dwk[3] * cv + w * g0
                    dA[c, 4] += dwk[4] * cv + w * g1
                    dA[c, 5] += dwk[5] * cv + w * g2
            T *= 1.0 - alpha
            if T < T_STOP:
                break
        rgb_out[r, 0] = A0 + (1.0 - W) * bg[0]
        rgb_out[r, 1] = A1 + (1.0 - W) * bg[1]
        rgb_out[r, 2] = A2 + (1.0 - W) * bg[2]
        wsum_out[r] = W
        valid = W >= min_weight
        depth_out[r] = Z / max(W, 1e-6) if valid else 0.0
        if want_jac:
            for q in range(6):
                for c in range(3):
                    jac_out[r, c, q] = dA[c, q] - dW[q] * bg[c]
                if valid:
                    jac_out[r, 3, q] = (dZ[q] * W - Z * dW[q]) / (W * W)
                else:
                    jac_out[r, 3, q] = 0.0


@njit(cache=True)
def grid_backward(grid, skip, bmin, inv_sp, R, t, dirs, zs, bg, min_weight, adj_rgb, adj_depth, grad_out):
    """Scatter d(loss)/d(grid) for upstream per-ray gradients on rgb and depth."""
    nx, ny, nz = grid.shape[0], grid.shape[1], grid.shape[2]
    n_samples = zs.shape[0]
    vals = np.empty(4)
    grads = np.empty((4, 3))
    alphas = np.empty(n_samples)
    trans = np.empty(n_samples)
    hit_z = np.empty(n_samples)
    cols = np.empty((n_samples, 3))
    cells = np.empty((n_samples, 3), np.int64)
    fracs = np.empty((n_samples, 3))
    for r in range(dirs.shape[0]):
        d0 = R[0, 0] * dirs[r, 0] + R[0, 1] * dirs[r, 1] + R[0, 2] * dirs[r, 2]
        d1 = R[1, 0] * dirs[r, 0] + R[1, 1] * dirs[r, 1] + R[1, 2] * dirs[r, 2]
        d2 = R[2, 0] * dirs[r, 0] + R[2, 1] * dirs[r, 1] + R[2, 2] * dirs[r, 2]
        T = 1.0
        W = 0.0
        Z = 0.0
        m = 0
        for s in range(n_samples):
            z = zs[s]
            i, j, k, fx, fy, fz = locate(t[0] + d0 * z, t[1] + d1 * z, t[2] + d2 * z,
                                         bmin, inv_sp, nx, ny, nz)
            if i < 0 or skip[i, j, k]:
                continue
            trilinear(grid, i, j, k, fx, fy, fz, vals, grads, inv_sp, False)
            alpha = _sigmoid(vals[0])
            alphas[m] = alpha
            trans[m] = T
            hit_z[m] = z
            cols[m, 0] = vals[1]
            cols[m, 1] = vals[2]
            cols[m, 2] = vals[3]
            cells[m, 0] = i
            cells[m, 1] = j
            cells[m, 2] = k
            fracs[m, 0] = fx
            fracs[m, 1] = fy
            fracs[m, 2] = fz
            W += alpha * T
            Z += alpha * T * z
            m += 1
            T *= 1.0 - alpha
            if T < T_STOP:
                break
        g0 = adj_rgb[r, 0]
        g1 = adj_rgb[r, 1]
        g2 = adj_rgb[r, 2]
        dLdW = -(g0 * bg[0] + g1 * bg[1] + g2 * bg[2])
        dLdZ = 0.0
        if W >= min_weight:
            dLdW -= adj_depth[r] * Z / (W * W)
            dLdZ = adj_depth[r] / W
        acc = 0.0
        for s in range(m - 1, -1, -1):
            alpha = alphas[s]
            q = g0 * cols[s, 0] + g1 * cols[s, 1] + g2 * cols[s, 2] + dLdW + dLdZ * hit_z[s]
            dalpha = trans[s] * (q - acc)
            acc = q * alpha + (1.0 - alpha) * acc
            dlogit = dalpha * alpha * (1.0 - alpha)
            w = alpha * trans[s]
            i = cells[s, 0]
            j = cells[s, 1]
            k = cells[s, 2]
            fx = fracs[s, 0]
            fy = fracs[s, 1]
            fz = fracs[s, 2]
            for a in range(2):
                wx = fx if a else 1.0 - fx
                for b in range(2):
                    wy = fy if b else 1.0 - fy
                    for d in range(2):
                        cw = wx * wy * (fz if d else 1.0 - fz)
                        grad_out[i + a, j + b, k + d, 0] += cw * dlogit
                        grad_out[i + a, j + b, k + d, 1] += cw * w * g0
                        grad_out[i + a, j + b, k + d, 2] += cw * w * g1
                        grad_out[i + a, j + b, k + d, 3] += cw * w * g2


@njit(cache=True)
def sample_points(grid, skip, bmin, inv_sp, pts, out):
    """Logit and color at arbitrary points; outside/skipped points get -inf logits."""
    nx, ny, nz = grid.shape[0], grid.shape[1], grid.shape[2]
    vals = np.empty(4)
    grads = np.empty((4, 3))
    for r in range(pts.shape[0]):
        i, j, k, fx, fy, fz = locate(pts[r, 0], pts[r, 1], pts[r, 2], bmin, inv_sp, nx, ny, nz)
        if i < 0:
            out[r, 0] = -np.inf
            out[r, 1] = 0.0
            out[r, 2] = 0.0
            out[r, 3] = 0.0
            continue
        trilinear(grid, i, j, k, fx, fy, fz, vals, grads, inv_sp, False)
        for c in range(4):
            out[r, c] = vals[c]
