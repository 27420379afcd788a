"""Shared test fixtures: tiny in-memory cases and brute-force oracles."""

import numpy as np

from cavseg.volgrid import Case, LabelMask, SequenceId, Volume3


def make_case(dims=(16, 16, 16), radius=4.0, case_id="c0", patient_id="p0",
              timepoint=0, with_mask=True, seed=0):
    """A synthetic case: a centered ball mask and noisy channels correlated with it."""
    rng = np.random.default_rng(seed)
    nx, ny, nz = dims
    x, y, z = np.ogrid[:nx, :ny, :nz]
    dist2 = (x - nx / 2) ** 2 + (y - ny / 2) ** 2 + (z - nz / 2) ** 2
    mask = (dist2 <= radius**2).astype(np.uint8)
    channels = {}
    for i, seq in enumerate(SequenceId.canonical_order()):
        data = 1.0 + 0.5 * i + 2.0 * mask + 0.05 * rng.standard_normal(dims)
        channels[seq] = Volume3(data=data)
    return Case(
        case_id=case_id,
        patient_id=patient_id,
        timepoint=timepoint,
        channels=channels,
        mask=LabelMask(data=mask) if with_mask else None,
    )


def brute_force_conv3d(x, kernel, bias):
    """Direct триple-loop same-padded cross-correlation; oracle for conv3d."""
    co, ci, kx, ky, kz = kernel.shape
    _, X, Y, Z = x.shape
    px, py, pz = kx // 2, ky // 2, kz // 2
    out = np.zeros((co, X, Y, Z))
    for o in range(co):
        for xx in range(X):
            for yy in range(Y):
                for zz in range(Z):
                    acc = 0.0
                    for c in range(ci):
                        for a in range(kx):
                            for b in range(ky):
                                for d in range(kz):
                                    ix, iy, iz = xx + a - px, yy + b - py, zz + d - pz
                                    if 0 <= ix < X and 0 <= iy < Y and 0 <= iz < Z:
                                        acc += x[c, ix, iy, iz] * kernel[o, c, a, b, d]
                    out[o, xx, yy, zz] = acc + bias[o]
    return out


def flood_fill_components(mask, connectivity):
    """Independent brute-force component finder on a 3D binary array.

    Grows each component as a python set of coordinate tuples until fixpoint.
    Returns a list of (component set, min x-fastest linear index), in scan order.
    """
    nx, ny, nz = mask.shape
    if connectivity == 6:
        offsets = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    else:
        offsets = [
            (dx, dy, dz)
            for dx in (-1, 0, 1)
            for dy in (-1, 0, 1)
            for dz in (-1, 0, 1)
            if (dx, dy, dz) != (0, 0, 0)
        ]
    remaining = set()
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if mask[x, y, z]:
                    remaining.add((x, y, z))
    comps = []
    # scan seeds in x-fastest order
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                seed = (x, y, z)
                if seed not in remaining:
                    continue
                comp = {seed}
                frontier = {seed}
                remaining.discard(seed)
                while frontier:
                    nxt = set()
                    for (cx, cy, cz) in frontier:
                        for (dx, dy, dz) in offsets:
                            nb = (cx + dx, cy + dy, cz + dz)
                            if nb in remaining:
                                remaining.discard(nb)
                                nxt.add(nb)
                    comp |= nxt
                    frontier = nxt
                min_lin = min(cx + nx * (cy + ny * cz) for (cx, cy, cz) in comp)
                comps.append((comp, min_lin))
    return comps


def largest_component_oracle(mask, connectivity):
    """Expected output of the largest-component filter, via flood_fill_components."""
    comps = flood_fill_components(mask, connectivity)
    out = np.zeros_like(mask)
    if not comps:
        return out
    best = max(comps, key=lambda c: (len(c[0]), -c[1]))
    for (x, y, z) in best[0]:
        out[x, y, z] = 1
    return out


def wilcoxon_enumeration_oracle(diffs):
    """Exact two-sided p by brute force over all 2^n sign assignments.

    Zero differences must already be excluded. Uses average ranks for ties,
    W = min(W+, W-), p = min(1, 2 * P(W'+ <= W)).
    """
    d = np.asarray(diffs, dtype=np.float64)
    assert (d != 0).all()
    n = d.size
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    count = 0
    for bits in range(2**n):
        s = 0.0
        for i in range(n):
            if bits >> i & 1:
                s += ranks[i]
        if s <= w + 1e-12:
            count += 1
    p = min(1.0, 2.0 * count / 2**n)
    return w, p


def _average_ranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks
