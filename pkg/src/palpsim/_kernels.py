"""Hot-path numerical kernels (numba, cached).

The skeleton integrator lives here because the 1 kHz budget leaves no room
for per-tick numpy dispatch overhead on link-sized arrays. Everything else
in the package stays plain numpy.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def kdk_integrate(pos, vel, inv_mass, anchored, link_i, link_j,
                  rest_len, ks, kd, external, gravity, h, n_substeps):
    """Kick-drift-kick (velocity Verlet) substeps, in place.

    Damping is evaluated at the velocity entering each half kick. Anchored
    nodes are never written. Returns the number of singular (coincident
    endpoint) link evaluations encountered.
    """
    n_nodes = pos.shape[0]
    n_links = link_i.shape[0]
    force = np.empty((n_nodes, 3))
    singular = 0
    for _ in range(n_substeps):
        for half in range(2):
            for n in range(n_nodes):
                force[n, 0] = external[n, 0]
                force[n, 1] = external[n, 1]
                force[n, 2] = external[n, 2]
            for e in range(n_links):
                i = link_i[e]
                j = link_j[e]
                dx = pos[j, 0] - pos[i, 0]
                dy = pos[j, 1] - pos[i, 1]
                dz = pos[j, 2] - pos[i, 2]
                dist = np.sqrt(dx * dx + dy * dy + dz * dz)
                if dist < 1e-9:
                    singular += 1
                    continue
                inv = 1.0 / dist
                rvx = vel[j, 0] - vel[i, 0]
                rvy = vel[j, 1] - vel[i, 1]
                rvz = vel[j, 2] - vel[i, 2]
                rel = (rvx * dx + rvy * dy + rvz * dz) * inv
                fmag = (ks[e] * (dist - rest_len[e]) + kd[e] * rel) * inv
                fx = fmag * dx
                fy = fmag * dy
                fz = fmag * dz
                force[i, 0] += fx
                force[i, 1] += fy
                force[i, 2] += fz
                force[j, 0] -= fx
                force[j, 1] -= fy
                force[j, 2] -= fz
            half_h = 0.5 * h
            for n in range(n_nodes):
                if anchored[n]:
                    continue
                vel[n, 0] += half_h * (force[n, 0] * inv_mass[n] + gravity[0])
                vel[n, 1] += half_h * (force[n, 1] * inv_mass[n] + gravity[1])
                vel[n, 2] += half_h * (force[n, 2] * inv_mass[n] + gravity[2])
            if half == 0:
                for n in range(n_nodes):
                    if anchored[n]:
                        continue
                    pos[n, 0] += h * vel[n, 0]
                    pos[n, 1] += h * vel[n, 1]
                    pos[n, 2] += h * vel[n, 2]
    return singular
