"""Compiled inner loops for the tube simulator and rollout collection.

Everything here operates on plain float64 arrays so the hot path (ray
casting, contact projection, policy evaluation during rollouts) runs at
compiled speed on a single core.  The public geometry/simulator modules
wrap these kernels; tests compare them against independent brute-force
implementations.

Conventions:
  - the centerline is a polyline `pts` (N, 3) with uniform arc spacing
    `ds`; arc position s = (segment index + fraction) * ds
  - frames are right-handed with right = forward x up
  - fastmath stays off: results must be bit-reproducible
"""

import math

import numpy as np
from numba import njit

INF = np.inf

# terminal codes shared with the Python layer
RUNNING = 0
REACHED_END = 1
HORIZON_EXHAUSTED = 2


@njit(cache=True)
def nearest_point(px, py, pz, pts, j_lo, j_hi):
    """Closest point on polyline segments [j_lo, j_hi] to p.

    Returns (segment index, fraction in [0, 1], squared distance).
    """
    n_seg = pts.shape[0] - 1
    if j_lo < 0:
        j_lo = 0
    if j_hi > n_seg - 1:
        j_hi = n_seg - 1
    best_j = j_lo
    best_t = 0.0
    best_d2 = INF
    for j in range(j_lo, j_hi + 1):
        ax = pts[j, 0]
        ay = pts[j, 1]
        az = pts[j, 2]
        bx = pts[j + 1, 0] - ax
        by = pts[j + 1, 1] - ay
        bz = pts[j + 1, 2] - az
        denom = bx * bx + by * by + bz * bz
        t = ((px - ax) * bx + (py - ay) * by + (pz - az) * bz) / denom
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        qx = ax + t * bx - px
        qy = ay + t * by - py
        qz = az + t * bz - pz
        d2 = qx * qx + qy * qy + qz * qz
        if d2 < best_d2:
            best_d2 = d2
            best_j = j
            best_t = t
    return best_j, best_t, best_d2


@njit(cache=True)
def nearest_point_windowed(px, py, pz, pts, j_guess, window):
    """Window search around j_guess, expanding if the best lands on the edge."""
    n_seg = pts.shape[0] - 1
    w = window
    while True:
        j_lo = j_guess - w
        j_hi = j_guess + w
        j, t, d2 = nearest_point(px, py, pz, pts, j_lo, j_hi)
        at_lo = j == max(j_lo, 0) and j > 0
        at_hi = j == min(j_hi, n_seg - 1) and j < n_seg - 1
        if not (at_lo or at_hi) or w >= n_seg:
            return j, t, d2
        w *= 4


@njit(cache=True)
def ray_wall_distance(ox, oy, oz, dx, dy, dz, pts, j_start, wall_r, d_max, ds,
                      tan_first, tan_last):
    """Distance along the ray to the tube wall by conservative sphere tracing.

    The step bound wall_r - dist(p, centerline) never overshoots the wall
    surface (distance to a set is 1-Lipschitz).  Returns inf when the ray
    leaves through an end cap or exceeds d_max without hitting the wall.
    """
    tol = 1e-3
    min_step = 0.02
    n_pts = pts.shape[0]
    win = int((wall_r * 1.6 + 8.0) / ds) + 2
    t = 0.0
    j = j_start
    for _ in range(6000):
        px = ox + t * dx
        py = oy + t * dy
        pz = oz + t * dz
        j, frac, d2 = nearest_point_windowed(px, py, pz, pts, j, win)
        # end-cap exits: footpoint pinned to an end and the point lies beyond it
        if j == n_pts - 2 and frac >= 1.0:
            ex = px - pts[n_pts - 1, 0]
            ey = py - pts[n_pts - 1, 1]
            ez = pz - pts[n_pts - 1, 2]
            if ex * tan_last[0] + ey * tan_last[1] + ez * tan_last[2] > 0.0:
                return INF
        if j == 0 and frac <= 0.0:
            ex = px - pts[0, 0]
            ey = py - pts[0, 1]
            ez = pz - pts[0, 2]
            if ex * tan_first[0] + ey * tan_first[1] + ez * tan_first[2] < 0.0:
                return INF
        f = wall_r - math.sqrt(d2)
        if f < tol:
            hit = t + f
            if hit < 0.0:
                hit = 0.0
            return hit
        step = f if f > min_step else min_step
        t += step
        if t > d_max:
            return INF
    return t


# fractional offsets of the 4x4 cell centers across the field of view;
# index 0 is the top row / left column of the rendered image
_ROW_FRACS = (0.75, 0.25, -0.25, -0.75)
_COL_FRACS = (-0.75, -0.25, 0.25, 0.75)


@njit(cache=True)
def observe_cells(pos, fwd, up, right, j_start, pts, wall_r, fov, d_max, ds,
                  tan_first, tan_last, cells):
    """Fill cells (16,) with clamp(1 - d / d_max, 0, 1) per frustum ray."""
    half = math.tan(0.5 * fov)
    for rr in range(4):
        vy = half * _ROW_FRACS[rr]
        for cc in range(4):
            vx = half * _COL_FRACS[cc]
            dx = fwd[0] + vx * right[0] + vy * up[0]
            dy = fwd[1] + vx * right[1] + vy * up[1]
            dz = fwd[2] + vx * right[2] + vy * up[2]
            inv = 1.0 / math.sqrt(dx * dx + dy * dy + dz * dz)
            dx *= inv
            dy *= inv
            dz *= inv
            d = ray_wall_distance(pos[0], pos[1], pos[2], dx, dy, dz, pts,
                                  j_start, wall_r, d_max, ds, tan_first, tan_last)
            if d == INF:
                b = 0.0
            else:
                b = 1.0 - d / d_max
                if b < 0.0:
                    b = 0.0
                elif b > 1.0:
                    b = 1.0
            cells[rr * 4 + cc] = b


@njit(cache=True)
def rotate_frame(fwd, up, right, action, ang):
    """Rotate the frame for one action; 0 leaves it unchanged.

    1/2 pitch about `right` (toward/away from `up`), 3/4 yaw about `up`
    (toward/away from `right`); 1-2 and 3-4 are exact inverses.
    """
    if action == 0 or ang == 0.0:
        return
    c = math.cos(ang)
    s = math.sin(ang)
    if action == 2 or action == 4:
        s = -s
    if action == 1 or action == 2:
        for i in range(3):
            fi = fwd[i]
            ui = up[i]
            fwd[i] = c * fi + s * ui
            up[i] = c * ui - s * fi
    else:
        for i in range(3):
            fi = fwd[i]
            ri = right[i]
            fwd[i] = c * fi + s * ri
            right[i] = c * ri - s * fi


@njit(cache=True)
def orthonormalize(fwd, up, right):
    norm = math.sqrt(fwd[0] ** 2 + fwd[1] ** 2 + fwd[2] ** 2)
    for i in range(3):
        fwd[i] /= norm
    dot = up[0] * fwd[0] + up[1] * fwd[1] + up[2] * fwd[2]
    for i in range(3):
        up[i] -= dot * fwd[i]
    norm = math.sqrt(up[0] ** 2 + up[1] ** 2 + up[2] ** 2)
    for i in range(3):
        up[i] /= norm
    right[0] = fwd[1] * up[2] - fwd[2] * up[1]
    right[1] = fwd[2] * up[0] - fwd[0] * up[2]
    right[2] = fwd[0] * up[1] - fwd[1] * up[0]


@njit(cache=True)
def step_state(pos, fwd, up, right, j_prev, action, pts, ds, total_len,
               wall_clearance, lin_vel, ang_step, eta, beta, goal_threshold,
               tan_first, tan_last):
    """Advance the capsule one step.

    Returns (j, s, contact, reward, reached) where s is the arc position of
    the closest centerline point and reached flags the goal terminal.
    """
    rotate_frame(fwd, up, right, action, ang_step)
    orthonormalize(fwd, up, right)
    for i in range(3):
        pos[i] += lin_vel * fwd[i]

    win = int((lin_vel + wall_clearance + 6.0) / ds) + 2
    j, frac, d2 = nearest_point_windowed(pos[0], pos[1], pos[2], pts, j_prev, win)

    # keep the capsule inside the start cap (it cannot back out of the tube)
    if j == 0 and frac <= 0.0:
        ex = pos[0] - pts[0, 0]
        ey = pos[1] - pts[0, 1]
        ez = pos[2] - pts[0, 2]
        behind = ex * tan_first[0] + ey * tan_first[1] + ez * tan_first[2]
        if behind < 0.0:
            for i in range(3):
                pos[i] -= behind * tan_first[i]
            j, frac, d2 = nearest_point_windowed(pos[0], pos[1], pos[2], pts, j, win)

    d = math.sqrt(d2)
    contact = 0
    if d > wall_clearance:
        # slide back onto the contact surface, radially toward the footpoint
        qx = pts[j, 0] + frac * (pts[j + 1, 0] - pts[j, 0])
        qy = pts[j, 1] + frac * (pts[j + 1, 1] - pts[j, 1])
        qz = pts[j, 2] + frac * (pts[j + 1, 2] - pts[j, 2])
        scale = wall_clearance / d
        pos[0] = qx + (pos[0] - qx) * scale
        pos[1] = qy + (pos[1] - qy) * scale
        pos[2] = qz + (pos[2] - qz) * scale
        contact = 1

    s = (j + frac) * ds
    remaining = total_len - s
    reached = 0
    if remaining < goal_threshold:
        reward = 10.0
        reached = 1
    elif contact == 1:
        reward = -beta
    else:
        reward = -remaining * eta
    return j, s, contact, reward, reached


@njit(cache=True)
def reset_state(pos, fwd, up, right, pts, u0, r0, tan_first, noise,
                lateral_max, angle_max):
    """Place the capsule at the tube start with a small seeded perturbation."""
    rho = lateral_max * math.sqrt(noise[0])
    phi = 2.0 * math.pi * noise[1]
    cr = rho * math.cos(phi)
    cu = rho * math.sin(phi)
    for i in range(3):
        pos[i] = pts[0, i] + cr * r0[i] + cu * u0[i]
        fwd[i] = tan_first[i]
        up[i] = u0[i]
        right[i] = r0[i]
    pitch = angle_max * (2.0 * noise[2] - 1.0)
    yaw = angle_max * (2.0 * noise[3] - 1.0)
    if pitch != 0.0 or yaw != 0.0:
        rotate_frame(fwd, up, right, 1, pitch)
        rotate_frame(fwd, up, right, 3, yaw)
        orthonormalize(fwd, up, right)


@njit(cache=True)
def policy_logits(obs, flat, w_off, b_off, in_sz, out_sz, acts, h0, h1, logits):
    """Evaluate the packed MLP on one observation; logits gets the output."""
    n_layers = in_sz.shape[0]
    for i in range(obs.shape[0]):
        h0[i] = obs[i]
    use_a = True
    for layer in range(n_layers):
        nin = in_sz[layer]
        nout = out_sz[layer]
        wo = w_off[layer]
        bo = b_off[layer]
        src = h0 if use_a else h1
        if layer == n_layers - 1:
            out = logits
        else:
            out = h1 if use_a else h0
        for k in range(nout):
            acc = flat[bo + k]
            base = wo + k * nin
            for m in range(nin):
                acc += flat[base + m] * src[m]
            if acts[layer] == 1 and acc < 0.0:
                acc = 0.0
            out[k] = acc
        use_a = not use_a


@njit(cache=True)
def rollout(
    # mutable capsule state
    pos, fwd, up, right, state_ints, ep_acc,
    # geometry
    pts, ds, total_len, tan_first, tan_last, u0, r0,
    # environment parameters
    wall_r, wall_clearance, lin_vel, ang_step, eta, beta, goal_threshold,
    horizon, fov, d_max, lateral_max, angle_max,
    # packed policy
    flat, w_off, b_off, in_sz, out_sz, acts,
    # random pools
    reset_noise, action_uniforms,
    # mode
    greedy, max_episodes,
    # outputs
    obs_out, act_out, rew_out, cost_out, term_out, pos_out, trunc_obs_out,
    final_obs_out, ep_return_out, ep_cost_out, ep_len_out, ep_reached_out,
    scratch_a, scratch_b, logits,
):
    """Collect up to n_steps transitions, auto-resetting between episodes.

    state_ints holds [segment index, steps elapsed in episode, resets consumed].
    ep_acc holds the running [return, cost, length] of the open episode.
    Returns (steps collected, episodes completed).
    """
    n_steps = obs_out.shape[0]
    n_actions = logits.shape[0]
    episodes_done = 0
    t = 0
    while t < n_steps:
        observe_cells(pos, fwd, up, right, state_ints[0], pts, wall_r, fov,
                      d_max, ds, tan_first, tan_last, obs_out[t])
        policy_logits(obs_out[t], flat, w_off, b_off, in_sz, out_sz, acts,
                      scratch_a, scratch_b, logits)
        if greedy == 1:
            action = 0
            best = logits[0]
            for k in range(1, n_actions):
                if logits[k] > best:
                    best = logits[k]
                    action = k
        else:
            zmax = logits[0]
            for k in range(1, n_actions):
                if logits[k] > zmax:
                    zmax = logits[k]
            total = 0.0
            for k in range(n_actions):
                total += math.exp(logits[k] - zmax)
            u = action_uniforms[t] * total
            acc = 0.0
            action = n_actions - 1
            for k in range(n_actions):
                acc += math.exp(logits[k] - zmax)
                if u < acc:
                    action = k
                    break

        j, s, contact, reward, reached = step_state(
            pos, fwd, up, right, state_ints[0], action, pts, ds, total_len,
            wall_clearance, lin_vel, ang_step, eta, beta, goal_threshold,
            tan_first, tan_last)
        state_ints[0] = j
        state_ints[1] += 1

        cost = 1.0 if contact == 1 else 0.0
        terminal = RUNNING
        if reached == 1:
            terminal = REACHED_END
        elif state_ints[1] >= horizon:
            terminal = HORIZON_EXHAUSTED

        act_out[t] = action
        rew_out[t] = reward
        cost_out[t] = cost
        term_out[t] = terminal
        pos_out[t, 0] = pos[0]
        pos_out[t, 1] = pos[1]
        pos_out[t, 2] = pos[2]

        ep_acc[0] += reward
        ep_acc[1] += cost
        ep_acc[2] += 1.0

        if terminal != RUNNING:
            if terminal == HORIZON_EXHAUSTED:
                observe_cells(pos, fwd, up, right, state_ints[0], pts, wall_r,
                              fov, d_max, ds, tan_first, tan_last,
                              trunc_obs_out[t])
            ep_return_out[episodes_done] = ep_acc[0]
            ep_cost_out[episodes_done] = ep_acc[1]
            ep_len_out[episodes_done] = ep_acc[2]
            ep_reached_out[episodes_done] = 1 if terminal == REACHED_END else 0
            episodes_done += 1
            ep_acc[0] = 0.0
            ep_acc[1] = 0.0
            ep_acc[2] = 0.0
            reset_state(pos, fwd, up, right, pts, u0, r0, tan_first,
                        reset_noise[state_ints[2]], lateral_max, angle_max)
            state_ints[0] = 0
            state_ints[1] = 0
            state_ints[2] += 1
            if max_episodes > 0 and episodes_done >= max_episodes:
                t += 1
                break
        t += 1

    observe_cells(pos, fwd, up, right, state_ints[0], pts, wall_r, fov, d_max,
                  ds, tan_first, tan_last, final_obs_out)
    return t, episodes_done
