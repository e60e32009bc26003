"""L-inf PGD attacks: supervised (cross-entropy) and feature scattering.

Feature scattering perturbs a batch, with no labels, so that the entropic
optimal-transport distance between clean and perturbed feature batches is
as large as possible.
"""
import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)


@dataclass
class AttackBudget:
    epsilon: float = 8 / 255
    steps: int = 20
    step_size: float = 2 / 255
    random_start: bool = True
    norm: str = "linf"

    def __post_init__(self):
        if self.norm != "linf":
            raise ValueError("only the L-inf norm is supported")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.epsilon < 0 or self.step_size <= 0:
            raise ValueError("need epsilon >= 0 and step_size > 0")
        if self.epsilon > 0 and self.step_size > self.epsilon:
            raise ValueError("step_size must not exceed epsilon")

    def describe(self):
        start = "rand" if self.random_start else "zero"
        return (f"PGD-{self.steps} linf eps={self.epsilon:.5f} "
                f"alpha={self.step_size:.5f} start={start}")


@dataclass
class OTConfig:
    reg: float = 0.01
    iterations: int = 50

    def __post_init__(self):
        if self.reg <= 0 or self.iterations < 1:
            raise ValueError("need reg > 0 and iterations >= 1")


def _project(x, x_adv, epsilon):
    delta = (x_adv - x).clamp(-epsilon, epsilon)
    return (x + delta).clamp(0.0, 1.0)


# outputs checked against the eps-ball and the image range (per process)
CONTRACT_CHECKS = {"calls": 0, "elements": 0}


def _check_contract(x, x_adv, epsilon):
    """Every PGD output must lie in the eps-ball around x and in [0, 1].

    The tolerance is one rounding step of the image dtype: x + delta can land
    a single ulp past the bound even when |delta| <= eps exactly.
    """
    tol = 4 * torch.finfo(x.dtype).eps
    if (x_adv - x).abs().max() > epsilon + tol or x_adv.min() < 0.0 or x_adv.max() > 1.0:
        raise AssertionError("PGD output left the epsilon-ball or the [0, 1] range")
    CONTRACT_CHECKS["calls"] += 1
    CONTRACT_CHECKS["elements"] += x_adv.numel()


def _random_start(x, epsilon, generator):
    noise = torch.rand(x.shape, generator=generator, dtype=x.dtype)
    return (x + (2.0 * noise - 1.0) * epsilon).clamp(0.0, 1.0)


def _pgd(objective, x, budget, generator, stats):
    """Sign-gradient ascent of ``objective(x_adv) -> per-sample losses``."""
    x = x.detach()
    if budget.epsilon == 0:
        return x.clone()
    x_adv = _random_start(x, budget.epsilon, generator) if budget.random_start else x.clone()
    failed = torch.zeros(x.shape[0], dtype=torch.bool)
    for _ in range(budget.steps):
        x_adv.requires_grad_(True)
        loss = objective(x_adv).sum()
        grad = None
        if loss.requires_grad:
            grad, = torch.autograd.grad(loss, x_adv, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(x_adv)
        bad = ~torch.isfinite(grad.flatten(1)).all(1)
        failed |= bad
        grad = torch.where(bad.view(-1, *[1] * (x.dim() - 1)), torch.zeros_like(grad), grad)
        with torch.no_grad():
            x_adv = _project(x, x_adv + budget.step_size * grad.sign(), budget.epsilon)
    x_adv = x_adv.detach()
    if failed.any():
        n = int(failed.sum())
        log.warning("PGD aborted for %d samples with non-finite gradients", n)
        if stats is not None:
            stats["nonfinite_grad"] += n
            stats["failed_index"] = torch.nonzero(failed).flatten().tolist()
        x_adv[failed] = x[failed]
    _check_contract(x, x_adv, budget.epsilon)
    return x_adv


def pgd_attack(model, x, y, budget, loss_fn=None, generator=None, stats=None):
    """Untargeted L-inf PGD maximizing ``loss_fn(model(x_adv), y)``.

    ``loss_fn`` must return per-sample losses; the default is cross-entropy.
    Samples whose gradient turns non-finite are returned clean and counted in
    ``stats["nonfinite_grad"]`` when a Counter is passed.
    """
    if loss_fn is None:
        def loss_fn(logits, target):
            return F.cross_entropy(logits, target, reduction="none")

    was_training = model.training
    model.eval()
    try:
        return _pgd(lambda xa: loss_fn(model(xa), y), x, budget, generator, stats)
    finally:
        model.train(was_training)


def _sinkhorn_cost(cost, reg, iterations):
    """Transport cost <P, C> of the entropic plan between uniform marginals."""
    n, m = cost.shape
    log_a = torch.full((n,), -math.log(n), dtype=cost.dtype, device=cost.device)
    log_b = torch.full((m,), -math.log(m), dtype=cost.dtype, device=cost.device)
    f = torch.zeros(n, dtype=cost.dtype, device=cost.device)
    g = torch.zeros(m, dtype=cost.dtype, device=cost.device)
    for _ in range(iterations):
        f = reg * (log_a - torch.logsumexp((g[None, :] - cost) / reg, dim=1))
        g = reg * (log_b - torch.logsumexp((f[:, None] - cost) / reg, dim=0))
    plan = torch.exp((f[:, None] + g[None, :] - cost) / reg)
    return (plan * cost).sum()


def sinkhorn_from_cost(cost, cfg=None):
    """Entropic OT cost for a given cost matrix (uniform marginals), in float64.

    Both orientations are solved and averaged so the result is symmetric under
    transposition even when the iteration budget stops short of convergence.
    """
    cfg = cfg or OTConfig()
    cost = torch.as_tensor(cost).double()
    if not torch.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite values")
    fwd = _sinkhorn_cost(cost, cfg.reg, cfg.iterations)
    bwd = _sinkhorn_cost(cost.T, cfg.reg, cfg.iterations)
    return 0.5 * (fwd + bwd)


def cosine_cost(a, b):
    a = F.normalize(a.flatten(1).double(), dim=1)
    b = F.normalize(b.flatten(1).double(), dim=1)
    # rounding can push the cosine a hair past +-1
    return (1.0 - a @ b.T).clamp(0.0, 2.0)


def sinkhorn_distance(a, b, cfg=None):
    """Entropic OT distance between two feature batches under 1 - cosine cost."""
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ValueError("empty feature batch")
    if not (torch.isfinite(a).all() and torch.isfinite(b).all()):
        raise ValueError("features contain non-finite values")
    cost = cosine_cost(a, b)
    if cost.shape == (1, 1):
        return cost[0, 0]
    return sinkhorn_from_cost(cost, cfg)


def feature_scatter_positive(extractor, x, budget, cfg=None, generator=None, stats=None):
    """Perturb ``x`` within the L-inf ball to maximize feature OT distortion.

    ``extractor`` maps an image batch to penultimate features. The clean
    features are fixed; the OT distance is ascended on the perturbed side.
    """
    cfg = cfg or OTConfig()
    module = extractor if isinstance(extractor, torch.nn.Module) else getattr(extractor, "__self__", None)
    if not isinstance(module, torch.nn.Module):
        module = None
    was_training = module.training if module is not None else None
    if module is not None:
        module.eval()
    try:
        with torch.no_grad():
            clean = extractor(x)

        def objective(xa):
            return sinkhorn_distance(clean, extractor(xa), cfg)

        return _pgd(objective, x, budget, generator, stats)
    finally:
        if module is not None:
            module.train(was_training)
