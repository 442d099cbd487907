"""Independent brute-force oracles the implementation is checked against.

Everything here is deliberately naive: per-pixel/per-Gaussian double loops,
scipy quaternion conversion, np.linalg matrix inverses, direct transmittance
products. Only the rendering *semantics* (culling rule, termination rule,
eigenvalue floor) are shared with the implementation, as they define the
operation being tested.
"""

import numpy as np
from scipy.spatial.transform import Rotation

TERM_THRESHOLD = 1e-4
CUTOFF = 3.0
EIG_FLOOR = 0.3


def oracle_rot(quat_wxyz):
    w, x, y, z = quat_wxyz
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def oracle_cov2d(field, i, pose, intr):
    """Screen covariance of Gaussian i via explicit matrix products."""
    R3 = oracle_rot(field.quat[i])
    S = np.diag(field.scale[i])
    sigma = R3 @ S @ S @ R3.T
    cam = pose.rotation @ field.mu[i] + pose.translation
    x, y, z = cam
    J = np.array([[intr.fx / z, 0.0, -intr.fx * x / z**2],
                  [0.0, intr.fy / z, -intr.fy * y / z**2]])
    cov = J @ pose.rotation @ sigma @ pose.rotation.T @ J.T
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, EIG_FLOOR)
    return vecs @ np.diag(vals) @ vecs.T


def naive_render(field, pose, intr, payload=None, with_depth=True):
    """Double-loop front-to-back compositor.

    payload: (N, C) channel values per Gaussian; defaults to field colors.
    Returns (channels (C,H,W), depth (H,W), alpha (H,W)).
    """
    if payload is None:
        payload = field.color
    H, W = intr.height, intr.width
    C = payload.shape[1]
    entries = []
    for i in range(len(field)):
        cam = pose.rotation @ field.mu[i] + pose.translation
        if not (intr.near < cam[2] < intr.far):
            continue
        u = intr.fx * cam[0] / cam[2] + intr.cx
        v = intr.fy * cam[1] / cam[2] + intr.cy
        A = np.linalg.inv(oracle_cov2d(field, i, pose, intr))
        entries.append((cam[2], i, u, v, A))
    entries.sort(key=lambda e: (e[0], e[1]))

    out = np.zeros((C, H, W))
    depth = np.zeros((H, W))
    alpha = np.zeros((H, W))
    for pu in range(H):
        for pv in range(W):
            T = 1.0
            for z, i, u, v, A in entries:
                d = np.array([pu - u, pv - v])
                q = d @ A @ d
                if q > CUTOFF**2:
                    continue
                if T < TERM_THRESHOLD:
                    break
                a = field.opacity[i] * np.exp(-0.5 * q)
                out[:, pu, pv] += payload[i] * a * T
                if with_depth:
                    depth[pu, pv] += z * a * T
                alpha[pu, pv] += a * T
                T *= 1.0 - a
    return out, depth, alpha


def central_difference(f, x0, step):
    """Componentwise central finite differences of scalar f at x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = g.reshape(-1)
    xf = x0.reshape(-1)
    for j in range(xf.size):
        xp = xf.copy(); xp[j] += step
        xm = xf.copy(); xm[j] -= step
        flat[j] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2 * step)
    return g


def random_scene(rng, n=8, K=6, D=4, spread=0.8, z_range=(2.0, 4.0),
                 scale_range=(0.05, 0.3), height=16, width=16, fov=60.0):
    """Small random field + camera placed at the origin looking down +z."""
    from semsplat.core import CameraIntrinsics, CameraPose, Codebook, GaussianField, quat_normalize

    mu = np.column_stack([
        rng.uniform(-spread, spread, n),
        rng.uniform(-spread, spread, n),
        rng.uniform(*z_range, n),
    ])
    field = GaussianField(
        mu=mu,
        quat=quat_normalize(rng.standard_normal((n, 4))),
        scale=rng.uniform(*scale_range, (n, 3)),
        opacity=rng.uniform(0.2, 1.0, n),
        color=rng.uniform(0, 1, (n, 3)),
        logits=rng.normal(0, 1.5, (n, K)),
    )
    codebook = Codebook(E=rng.normal(0, 1, (K, D)), N=np.ones(K),
                        M=rng.normal(0, 1, (K, D)), lam=0.96, epsilon=1e-5)
    intr = CameraIntrinsics.from_fov(height, width, fov)
    return field, codebook, CameraPose.identity(), intr
