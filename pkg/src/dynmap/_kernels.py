"""Compiled inner loops for the rigid-body simulator.

Everything here works on flat float64 arrays so numba can compile it in
nopython mode.  Body arrays are laid out as ``[x, y, theta, vx, vy, omega]``;
static boxes as rows of ``[cx, cy, theta, half_w, half_h]``.

Contact slots are fixed per feature so warm-start impulses can be cached
between steps: slots 0-3 are block corners against the cart, 4-7 cart corners
against the block, then 8 slots per static box in the same pattern.
"""
import math

import numba as nb
import numpy as np

_SX = np.array([-1.0, 1.0, 1.0, -1.0])
_SY = np.array([-1.0, -1.0, 1.0, 1.0])

CART_ID = -1


@nb.njit(cache=True)
def _add_pair(bx, by, bth, bhw, bhh, ox, oy, oth, ohw, ohh, other_id, slot_base,
              margin, cx, cy, nx, ny, sep, oid, slot, n):
    cb, sb = math.cos(bth), math.sin(bth)
    co, so = math.cos(oth), math.sin(oth)
    # block corners against the other box
    for i in range(4):
        px = bx + cb * _SX[i] * bhw - sb * _SY[i] * bhh
        py = by + sb * _SX[i] * bhw + cb * _SY[i] * bhh
        dx, dy = px - ox, py - oy
        lx = co * dx + so * dy
        ly = -so * dx + co * dy
        sx = abs(lx) - ohw
        sy = abs(ly) - ohh
        s = max(sx, sy)
        if s < margin:
            if sx >= sy:
                sg = 1.0 if lx >= 0.0 else -1.0
                nx[n] = co * sg
                ny[n] = so * sg
            else:
                sg = 1.0 if ly >= 0.0 else -1.0
                nx[n] = -so * sg
                ny[n] = co * sg
            cx[n] = px
            cy[n] = py
            sep[n] = s
            oid[n] = other_id
            slot[n] = slot_base + i
            n += 1
    # other box corners against the block
    for j in range(4):
        qx = ox + co * _SX[j] * ohw - so * _SY[j] * ohh
        qy = oy + so * _SX[j] * ohw + co * _SY[j] * ohh
        dx, dy = qx - bx, qy - by
        lx = cb * dx + sb * dy
        ly = -sb * dx + cb * dy
        sx = abs(lx) - bhw
        sy = abs(ly) - bhh
        s = max(sx, sy)
        if s < margin:
            # outward block face normal, flipped so it points into the block
            if sx >= sy:
                sg = 1.0 if lx >= 0.0 else -1.0
                nx[n] = -cb * sg
                ny[n] = -sb * sg
            else:
                sg = 1.0 if ly >= 0.0 else -1.0
                nx[n] = sb * sg
                ny[n] = -cb * sg
            cx[n] = qx
            cy[n] = qy
            sep[n] = s
            oid[n] = other_id
            slot[n] = slot_base + 4 + j
            n += 1
    return n


@nb.njit(cache=True)
def collide(cart, block, cart_half, block_half, statics, margin,
            cx, cy, nx, ny, sep, oid, slot):
    n = 0
    n = _add_pair(block[0], block[1], block[2], block_half[0], block_half[1],
                  cart[0], cart[1], cart[2], cart_half[0], cart_half[1],
                  CART_ID, 0, margin, cx, cy, nx, ny, sep, oid, slot, n)
    for k in range(statics.shape[0]):
        n = _add_pair(block[0], block[1], block[2], block_half[0], block_half[1],
                      statics[k, 0], statics[k, 1], statics[k, 2],
                      statics[k, 3], statics[k, 4],
                      k, 8 + 8 * k, margin, cx, cy, nx, ny, sep, oid, slot, n)
    return n


@nb.njit(cache=True)
def boxes_overlap(ax, ay, ath, ahw, ahh, bx, by, bth, bhw, bhh):
    ca, sa = math.cos(ath), math.sin(ath)
    cb, sb = math.cos(bth), math.sin(bth)
    dx, dy = bx - ax, by - ay
    axes = ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb))
    for k in range(4):
        ux, uy = axes[k]
        ra = ahw * abs(ca * ux + sa * uy) + ahh * abs(-sa * ux + ca * uy)
        rb = bhw * abs(cb * ux + sb * uy) + bhh * abs(-sb * ux + cb * uy)
        if abs(dx * ux + dy * uy) >= ra + rb:
            return False
    return True


@nb.njit(cache=True)
def simulate(cart, block, cart_half, block_half, inv_mass, inv_inertia,
             statics, cache, cmd, gravity, dt, mu, restitution, iterations,
             beta, slop, margin, n_steps):
    """Advance ``n_steps`` physics steps in place.

    Returns ``(diverged_at, cart_static_mask)``: the substep index at which a
    non-finite value appeared (-1 if none) and a bitmask of static boxes the
    cart overlapped during the call.
    """
    n_slots = cache.shape[0]
    m = n_slots
    cx = np.empty(m)
    cy = np.empty(m)
    nx = np.empty(m)
    ny = np.empty(m)
    sep = np.empty(m)
    oid = np.empty(m, dtype=np.int64)
    slot = np.empty(m, dtype=np.int64)
    rax = np.empty(m)
    ray = np.empty(m)
    rbx = np.empty(m)
    rby = np.empty(m)
    kn = np.empty(m)
    kt = np.empty(m)
    lam_n = np.empty(m)
    lam_t = np.empty(m)
    lam_b = np.empty(m)
    target = np.empty(m)
    mask = 0

    for step in range(n_steps):
        # kinematic cart: exact constant-acceleration update over the step
        v0x, v0y, w0 = cart[3], cart[4], cart[5]
        v1x = v0x + cmd[0] * dt
        v1y = v0y + cmd[1] * dt
        w1 = w0 + cmd[2] * dt
        cvx = 0.5 * (v0x + v1x)
        cvy = 0.5 * (v0y + v1y)
        cw = 0.5 * (w0 + w1)

        block[4] -= gravity * dt

        n = collide(cart, block, cart_half, block_half, statics, margin,
                    cx, cy, nx, ny, sep, oid, slot)

        bvx, bvy, bw = block[3], block[4], block[5]
        for c in range(n):
            rax[c] = cx[c] - block[0]
            ray[c] = cy[c] - block[1]
            if oid[c] == CART_ID:
                rbx[c] = cx[c] - cart[0]
                rby[c] = cy[c] - cart[1]
            else:
                rbx[c] = 0.0
                rby[c] = 0.0
            rn = rax[c] * ny[c] - ray[c] * nx[c]
            kn[c] = 1.0 / (inv_mass + inv_inertia * rn * rn)
            tx, ty = -ny[c], nx[c]
            rt = rax[c] * ty - ray[c] * tx
            kt[c] = 1.0 / (inv_mass + inv_inertia * rt * rt)

            # relative normal velocity before solving, for restitution
            ovx, ovy = 0.0, 0.0
            if oid[c] == CART_ID:
                ovx = cvx - cw * rby[c]
                ovy = cvy + cw * rbx[c]
            vrx = bvx - bw * ray[c] - ovx
            vry = bvy + bw * rax[c] - ovy
            vn = vrx * nx[c] + vry * ny[c]
            if sep[c] > 0.0:
                target[c] = -sep[c] / dt
            else:
                target[c] = 0.0
            if restitution > 0.0 and vn < -0.01:
                target[c] = max(target[c], -restitution * vn)

            lam_n[c] = cache[slot[c], 0]
            lam_t[c] = cache[slot[c], 1]
            lam_b[c] = 0.0
            px = lam_n[c] * nx[c] + lam_t[c] * tx
            py = lam_n[c] * ny[c] + lam_t[c] * ty
            bvx += inv_mass * px
            bvy += inv_mass * py
            bw += inv_inertia * (rax[c] * py - ray[c] * px)

        for _ in range(iterations):
            for c in range(n):
                ovx, ovy = 0.0, 0.0
                if oid[c] == CART_ID:
                    ovx = cvx - cw * rby[c]
                    ovy = cvy + cw * rbx[c]
                vrx = bvx - bw * ray[c] - ovx
                vry = bvy + bw * rax[c] - ovy
                vn = vrx * nx[c] + vry * ny[c]
                old = lam_n[c]
                lam_n[c] = max(old + kn[c] * (target[c] - vn), 0.0)
                d = lam_n[c] - old
                px, py = d * nx[c], d * ny[c]
                bvx += inv_mass * px
                bvy += inv_mass * py
                bw += inv_inertia * (rax[c] * py - ray[c] * px)

                tx, ty = -ny[c], nx[c]
                vrx = bvx - bw * ray[c] - ovx
                vry = bvy + bw * rax[c] - ovy
                vt = vrx * tx + vry * ty
                lim = mu * lam_n[c]
                old = lam_t[c]
                lam_t[c] = min(max(old - kt[c] * vt, -lim), lim)
                d = lam_t[c] - old
                px, py = d * tx, d * ty
                bvx += inv_mass * px
                bvy += inv_mass * py
                bw += inv_inertia * (rax[c] * py - ray[c] * px)

        # split-impulse position correction on pseudo-velocities
        pvx, pvy, pw = 0.0, 0.0, 0.0
        for _ in range(iterations):
            for c in range(n):
                if sep[c] >= -slop:
                    continue
                want = beta * (-sep[c] - slop) / dt
                vn = (pvx - pw * ray[c]) * nx[c] + (pvy + pw * rax[c]) * ny[c]
                old = lam_b[c]
                lam_b[c] = max(old + kn[c] * (want - vn), 0.0)
                d = lam_b[c] - old
                px, py = d * nx[c], d * ny[c]
                pvx += inv_mass * px
                pvy += inv_mass * py
                pw += inv_inertia * (rax[c] * py - ray[c] * px)

        block[3], block[4], block[5] = bvx, bvy, bw
        block[0] += (bvx + pvx) * dt
        block[1] += (bvy + pvy) * dt
        block[2] += (bw + pw) * dt

        cart[0] += cvx * dt
        cart[1] += cvy * dt
        cart[2] += cw * dt
        cart[3], cart[4], cart[5] = v1x, v1y, w1

        for s in range(n_slots):
            cache[s, 0] = 0.0
            cache[s, 1] = 0.0
        for c in range(n):
            cache[slot[c], 0] = lam_n[c]
            cache[slot[c], 1] = lam_t[c]

        for k in range(statics.shape[0]):
            if boxes_overlap(cart[0], cart[1], cart[2], cart_half[0], cart_half[1],
                             statics[k, 0], statics[k, 1], statics[k, 2],
                             statics[k, 3], statics[k, 4]):
                mask |= 1 << k

        for i in range(6):
            if not (math.isfinite(block[i]) and math.isfinite(cart[i])):
                return step, mask
    return -1, mask


@nb.njit(cache=True)
def contact_summary(cart, block, cart_half, block_half, statics, margin):
    """Count block contacts and measure tangential slip against the cart.

    Returns ``(n_cart, n_static, max_slip, max_penetration)``.
    """
    m = 8 + 8 * statics.shape[0]
    cx = np.empty(m)
    cy = np.empty(m)
    nx = np.empty(m)
    ny = np.empty(m)
    sep = np.empty(m)
    oid = np.empty(m, dtype=np.int64)
    slot = np.empty(m, dtype=np.int64)
    n = collide(cart, block, cart_half, block_half, statics, margin,
                cx, cy, nx, ny, sep, oid, slot)
    n_cart = 0
    n_static = 0
    slip = 0.0
    pen = 0.0
    for c in range(n):
        pen = max(pen, -sep[c])
        if oid[c] == CART_ID:
            n_cart += 1
            rax, ray = cx[c] - block[0], cy[c] - block[1]
            rbx, rby = cx[c] - cart[0], cy[c] - cart[1]
            vrx = block[3] - block[5] * ray - (cart[3] - cart[5] * rby)
            vry = block[4] + block[5] * rax - (cart[4] + cart[5] * rbx)
            slip = max(slip, abs(-vrx * ny[c] + vry * nx[c]))
        else:
            n_static += 1
    return n_cart, n_static, slip, pen
