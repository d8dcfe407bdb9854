"""Independent oracles shared by the test modules."""

import numpy as np


def direct_dft2(x):
    """Unitary 2-D DFT by explicit O(N^2) matrices."""
    H, W = x.shape
    Fh = np.exp(-2j * np.pi * np.outer(np.arange(H), np.arange(H)) / H) / np.sqrt(H)
    Fw = np.exp(-2j * np.pi * np.outer(np.arange(W), np.arange(W)) / W) / np.sqrt(W)
    return Fh @ x @ Fw.T


def central_diff(f, x, idx, h=1e-5):
    xp = x.copy()
    xm = x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def probe_coords(shape, n, rng):
    """Up to ``n`` random multi-indices into an array of ``shape``."""
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(n, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def net_param_gradcheck(net, x, gout, n_probe=40, h=1e-5, rng=None):
    """Max relative error between backprop and central differences on probed parameters.

    The scalar is sum(output * gout); multi-head gouts are tuples.
    """
    from autopnp import micrograd as mg

    rng = rng or np.random.default_rng(0)
    heads = gout if isinstance(gout, tuple) else (gout,)

    def scalar():
        out = net(x)
        outs = out if isinstance(out, tuple) else (out,)
        return sum(float(np.sum(o * g)) for o, g in zip(outs, heads) if g is not None)

    _, tape = mg.net_forward(net, x)
    grads, gin = mg.net_backward(net, tape, gout, accumulate=False)
    worst = 0.0
    for k, p in net.params.items():
        for idx in probe_coords(p.shape, max(2, n_probe // len(net.params)), rng):
            old = p[idx]
            p[idx] = old + h
            fp = scalar()
            p[idx] = old - h
            fm = scalar()
            p[idx] = old
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(fd - grads[k][idx]) / max(abs(fd), abs(grads[k][idx]), 1e-6))
    for idx in probe_coords(x.shape, 20, rng):
        fd = central_diff(lambda z: _with_input(net, z, heads), x, idx, h)
        worst = max(worst, abs(fd - gin[idx]) / max(abs(fd), abs(gin[idx]), 1e-6))
    return worst


def _with_input(net, z, heads):
    out = net(z)
    outs = out if isinstance(out, tuple) else (out,)
    return sum(float(np.sum(o * g)) for o, g in zip(outs, heads) if g is not None)


def _fwd_grad(u):
    gx = np.vstack([np.diff(u, axis=0), np.zeros((1, u.shape[1]))])
    gy = np.hstack([np.diff(u, axis=1), np.zeros((u.shape[0], 1))])
    return gx, gy


def _neg_adjoint(px, py):
    # -grad^T built column by column from the explicit difference matrix
    H, W = px.shape
    Dh = np.zeros((H, H))
    Dh[np.arange(H - 1), np.arange(H - 1)] = -1
    Dh[np.arange(H - 1), np.arange(1, H)] = 1
    Dw = np.zeros((W, W))
    Dw[np.arange(W - 1), np.arange(W - 1)] = -1
    Dw[np.arange(W - 1), np.arange(1, W)] = 1
    return -(Dh.T @ px + py @ Dw)


def tv_objective_ref(u, x, lam):
    gx, gy = _fwd_grad(u)
    return lam * np.sqrt(gx ** 2 + gy ** 2).sum() + 0.5 * ((u - x) ** 2).sum()


def tv_prox_oracle(x, lam, iters=10_000):
    """Projected gradient on the dual of the isotropic TV prox, step 1/(8 lam^2)."""
    px = np.zeros_like(x)
    py = np.zeros_like(x)
    tau = 1.0 / (8.0 * lam)
    for _ in range(iters):
        u = x + lam * _neg_adjoint(px, py)
        gx, gy = _fwd_grad(u)
        px, py = px + tau * gx, py + tau * gy
        n = np.maximum(1.0, np.sqrt(px ** 2 + py ** 2))
        px, py = px / n, py / n
    return x + lam * _neg_adjoint(px, py)


def direct_idft2(k):
    return np.conj(direct_dft2(np.conj(k)))


def cg_solve(apply, b, iters=500, tol=1e-14):
    """Conjugate gradients for a Hermitian positive-definite operator."""
    x = np.zeros_like(b)
    r = b - apply(x)
    p = r.copy()
    rs = np.vdot(r, r).real
    for _ in range(iters):
        Ap = apply(p)
        a = rs / np.vdot(p, Ap).real
        x = x + a * p
        r = r - a * Ap
        rs_new = np.vdot(r, r).real
        if np.sqrt(rs_new) < tol:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x
