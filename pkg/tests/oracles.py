"""Independent reference computations used by the test-suite."""

import torch

# Steps along unit directions. Inputs are low-dimensional, so a larger step keeps
# roundoff down; parameter directions touch every ReLU, so they need a smaller one.
# For inputs the check takes the better of two steps per direction: a ReLU whose
# pre-activation lies within 1e-5 of zero spoils the larger stencil, and
# roundoff spoils the smaller one.  A wrong gradient fails at both.
FD_STEP = (1e-5, 1e-6)
PARAM_STEP = 1e-6
COORD_STEP = 1e-5


def central_difference(fn, x, indices, h=COORD_STEP):
    """d fn / d x at flat ``indices`` by central differences (``fn`` returns a scalar)."""
    flat = x.detach().clone().reshape(-1)
    out = []
    for i in indices:
        old = flat[i].item()
        flat[i] = old + h
        up = fn(flat.view_as(x)).item()
        flat[i] = old - h
        down = fn(flat.view_as(x)).item()
        flat[i] = old
        out.append((up - down) / (2 * h))
    return torch.tensor(out, dtype=torch.float64)


def autograd_at(fn, x, indices):
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g.reshape(-1)[list(indices)].double()


def relative_error(analytic, numeric, floor=1e-6):
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(floor, dtype=torch.float64))
    return ((analytic - numeric).abs() / denom).max().item()


def sample_indices(n, k, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randperm(n, generator=g)[: min(k, n)].tolist()


def coordinate_gradient_error(fn, x, k=20, seed=0):
    """Max relative error between autograd and central differences at ``k`` coordinates."""
    idx = sample_indices(x.numel(), k, seed)
    return relative_error(autograd_at(fn, x, idx), central_difference(fn, x, idx))


def gradient_error(fn, x, k=5, seed=0, h=FD_STEP):
    """Max relative error of directional derivatives along ``k`` random unit directions.

    Compares ``grad(fn)(x) . v`` from autograd with ``(fn(x + h v) - fn(x - h v)) / 2h``.
    ``h`` may be a sequence of steps; each direction then keeps its smallest error.
    """
    steps = (h,) if isinstance(h, float) else tuple(h)
    x = x.detach()
    xg = x.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(xg), xg)
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(k):
            v = torch.randn(x.shape, generator=g, dtype=torch.float64).to(x.dtype)
            v = v / v.norm()
            analytic = torch.tensor([(grad * v).sum().item()], dtype=torch.float64)
            errors = []
            for step in steps:
                numeric = ((fn(x + step * v) - fn(x - step * v)) / (2 * step)).item()
                errors.append(relative_error(analytic, torch.tensor([numeric], dtype=torch.float64)))
            worst = max(worst, min(errors))
    return worst


def parameter_gradient_error(module, loss_fn, k=5, seed=0, h=PARAM_STEP):
    """Directional-derivative check over every parameter of ``module`` that receives a gradient."""
    module.zero_grad()
    loss_fn().backward()
    params = [p for p in module.parameters() if p.grad is not None]
    grads = [p.grad.detach().clone() for p in params]
    g = torch.Generator().manual_seed(seed)
    analytic, numeric = [], []
    with torch.no_grad():
        originals = [p.detach().clone() for p in params]
        for _ in range(k):
            dirs = [torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) for p in params]
            norm = sum((d**2).sum() for d in dirs).sqrt()
            dirs = [d / norm for d in dirs]
            analytic.append(sum((gr * d).sum().item() for gr, d in zip(grads, dirs)))
            values = []
            for sign in (1.0, -1.0):
                for p, o, d in zip(params, originals, dirs):
                    p.copy_(o + sign * h * d)
                values.append(loss_fn().item())
            numeric.append((values[0] - values[1]) / (2 * h))
        for p, o in zip(params, originals):
            p.copy_(o)
    return relative_error(torch.tensor(analytic, dtype=torch.float64), torch.tensor(numeric, dtype=torch.float64))


def projection(shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=torch.float64)
