"""Supervised/adversarial training, accuracy evaluation and linear probing."""
import logging
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .artifacts import state_hash
from .attacks import AttackBudget, pgd_attack

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    natural_acc: float
    adversarial_acc: float = None
    attack: str = None
    dataset: str = ""
    model: str = ""
    num_classes: int = None

    def __post_init__(self):
        for v in (self.natural_acc, self.adversarial_acc):
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError(f"accuracy {v} outside [0, 100]")
        if self.adversarial_acc is not None and self.adversarial_acc > self.natural_acc + 1e-9:
            log.warning("%s: adversarial accuracy %.2f exceeds natural %.2f",
                        self.model, self.adversarial_acc, self.natural_acc)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple = ()
    lr_gamma: float = 0.1
    seed: int = 0


def make_optimizer(params, cfg):
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(cfg.lr_milestones), cfg.lr_gamma)
    return opt, sched


def supervised_train(model, split, cfg, budget=None, params=None, log_every=0):
    """Cross-entropy training, on PGD examples when ``budget`` is given (Madry).

    ``params`` restricts which parameters are optimized (default: all).
    Returns per-epoch mean training loss.
    """
    gen = torch.Generator().manual_seed(cfg.seed)
    params = list(model.parameters()) if params is None else list(params)
    opt, sched = make_optimizer(params, cfg)
    history = []
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for x, y, _ in split.batches(cfg.batch_size, shuffle=True, generator=gen):
            if budget is not None:
                x = pgd_attack(model, x, y, budget, generator=gen)
            model.train()
            loss = F.cross_entropy(model(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(y)
            seen += len(y)
        sched.step()
        history.append(total / seen)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d loss %.4f", epoch + 1, history[-1])
    model.eval()
    return history


def adversarial_finetune(model, split, budget=None, epochs=10, lr=0.01, cfg=None, seed=0):
    """Fresh classification head, then full-network PGD adversarial training.

    Default attack is PGD-7 (eps 8/255, step 2/255, random start).
    """
    budget = budget or AttackBudget(steps=7)
    cfg = cfg or TrainConfig(epochs=epochs, lr=lr, seed=seed)
    torch.manual_seed(cfg.seed)
    model.fc.reset_parameters()
    for p in model.parameters():
        p.requires_grad_(True)
    supervised_train(model, split, cfg, budget=budget)
    return model


@torch.no_grad()
def _predict(model, x):
    return model(x).argmax(1)


def evaluate(model, split, budget=None, batch_size=256, seed=0, dataset="", model_id="",
             num_classes=None):
    """Natural and (optionally) PGD accuracy in percent over the whole split."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    out_dim = model.fc.out_features
    k = num_classes if num_classes is not None else int(split.labels.max()) + 1
    if k > out_dim:
        raise ValueError(f"model has {out_dim} outputs but data has {k} classes")
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    nat = adv = 0
    for x, y, _ in split.batches(batch_size):
        nat += int((_predict(model, x) == y).sum())
        if budget is not None:
            xa = pgd_attack(model, x, y, budget, generator=gen)
            adv += int((_predict(model, xa) == y).sum())
    n = len(split)
    return EvalReport(
        natural_acc=100.0 * nat / n,
        adversarial_acc=100.0 * adv / n if budget is not None else None,
        attack=budget.describe() if budget is not None else None,
        dataset=dataset, model=model_id, num_classes=out_dim,
    )


class ProbedModel(nn.Module):
    """Frozen backbone features followed by a trainable linear layer."""

    def __init__(self, backbone, num_classes):
        super().__init__()
        self.backbone = backbone
        self.fc = nn.Linear(backbone.feature_dim, num_classes)
        self.feature_dim = backbone.feature_dim
        self.input_size = getattr(backbone, "input_size", None)

    def features(self, x):
        return self.backbone.features(x)

    def forward(self, x):
        return self.fc(self.features(x))


@torch.no_grad()
def _extract(backbone, split, batch_size=256):
    backbone.eval()
    return torch.cat([backbone.features(x) for x, _, _ in split.batches(batch_size)])


def linear_probe_transfer(backbone, dataset, budget=None, epochs=30, lr=0.01, batch_size=64,
                          seed=0, model_id=""):
    """Train a linear classifier on frozen features of ``dataset.train``.

    Reports natural and PGD accuracy (default PGD-7) of backbone + probe on
    ``dataset.test``. The backbone must come back bit-identical.
    """
    budget = budget or AttackBudget(steps=7)
    size = getattr(backbone, "input_size", None)
    if size is not None and dataset.image_size != size:
        dataset = dataset.resized(size)
    before = state_hash(backbone)
    requires = [p.requires_grad for p in backbone.parameters()]
    for p in backbone.parameters():
        p.requires_grad_(False)
    try:
        torch.manual_seed(seed)
        probe = ProbedModel(backbone, dataset.num_classes)
        feats = _extract(backbone, dataset.train)
        labels = dataset.train.labels
        gen = torch.Generator().manual_seed(seed)
        opt = torch.optim.Adam(probe.fc.parameters(), lr=lr)
        for _ in range(epochs):
            order = torch.randperm(len(labels), generator=gen)
            for start in range(0, len(labels), batch_size):
                idx = order[start:start + batch_size]
                loss = F.cross_entropy(probe.fc(feats[idx]), labels[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        report = evaluate(probe, dataset.test, budget, seed=seed, dataset=dataset.name,
                          model_id=model_id)
    finally:
        for p, r in zip(backbone.parameters(), requires):
            p.requires_grad_(r)
    if state_hash(backbone) != before:
        raise RuntimeError("linear probe modified the frozen backbone")
    return report, probe
