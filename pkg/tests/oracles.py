"""Independent reference implementations used by the unit and acceptance tests."""
import numpy as np
import torch


def beta_oracle(c, n, s, lam):
    out = []
    for a, b in zip(c, n):
        out.append(max(1.0, abs(s * (a - b))) if abs(a - b) <= lam else 0.0)
    return out


def momentum_oracle(e_u, e_c, e_s, p, mu):
    """Direct scalar recursion, independent of the tensor implementation."""
    m, outs, moms, gammas = 0.0, [], [], []
    for i, (u, c, s) in enumerate(zip(e_u, e_c, e_s)):
        if i < p.delta:
            g = 0.0
        else:
            d = c - s
            b = max(1.0, abs(p.s_S * d)) if abs(d) <= p.lambda_safe else 0.0
            g = b * (c - u) + p.s_m * m
        outs.append(u + mu * (c - u - g))
        m = p.zeta_m * m + (1 - p.zeta_m) * g
        moms.append(m)
        gammas.append(g)
    return outs, moms, gammas


def dense_uce_oracle(W, sources, targets, preserve, ridge):
    """Stacked least squares on vec(W'), solved with numpy lstsq."""
    W = W.numpy().astype(np.float64)
    out, d = W.shape
    rows, rhs = [], []
    for c, v in zip(sources, targets):
        rows.append(np.kron(np.eye(out), c.numpy()[None]))
        rhs.append(v.numpy())
    for c in preserve:
        rows.append(np.kron(np.eye(out), c.numpy()[None]))
        rhs.append(W @ c.numpy())
    if ridge > 0:
        rows.append(np.sqrt(ridge) * np.eye(out * d))
        rhs.append(np.sqrt(ridge) * W.reshape(-1))
    sol, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
    return sol.reshape(out, d)


def fd_check(f, v, n_dirs=4, h=1e-6, seed=0):
    """Directional central differences vs autograd, relative error per direction."""
    v = v.clone().requires_grad_(True)
    f(v).backward()
    grad = v.grad.detach()
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_dirs):
        d = torch.randn(v.shape, generator=g, dtype=v.dtype)
        with torch.no_grad():
            num = (f(v + h * d) - f(v - h * d)).item() / (2 * h)
        ana = (grad * d).sum().item()
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-12))
    return worst
