"""Central finite differences, used as an independent check on autograd."""
import torch


def numeric_grad(fn, x: torch.Tensor, step: float = 1e-5, index=None) -> torch.Tensor:
    """d fn() / d x by central differences; ``x`` is perturbed in place.

    ``index`` restricts the check to a subset of flat positions.
    """
    flat = x.data.view(-1)
    grad = torch.zeros_like(flat)
    positions = range(flat.numel()) if index is None else index
    with torch.no_grad():
        for i in positions:
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(fn())
            flat[i] = orig - step
            down = float(fn())
            flat[i] = orig
            grad[i] = (up - down) / (2 * step)
    return grad.view_as(x)


def rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-300)
    return (analytic - numeric).norm().item() / scale


def check_inputs(fn, inputs, step=1e-5):
    """Relative error between autograd and finite differences for each input."""
    for x in inputs:
        x.grad = None
    fn().backward()
    errors = []
    for x in inputs:
        analytic = x.grad.detach().clone()
        errors.append(rel_error(analytic, numeric_grad(fn, x, step)))
    return errors
