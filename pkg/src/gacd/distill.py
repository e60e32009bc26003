"""GACD training loop and the soft-label KD baseline.

One GACD iteration:

1. build positives by feature-scattering PGD against the student,
2. embed them with the frozen teacher (anchor) and read its true-class
   probability as the sample weight,
3. embed them with the student (congruent pair) and draw k negatives per
   anchor from the memory bank, excluding the anchor's class,
4. ascend the batch-mean reweighted NCE likelihood over the student backbone
   and both projection heads, then refresh the bank slots of the batch.
"""
import copy
import json
import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .artifacts import atomic_write_text, config_hash, state_hash, torch_save_atomic
from .attacks import AttackBudget, OTConfig, feature_scatter_positive
from .contrastive import (
    CriticConfig,
    MemoryBank,
    count_saturated,
    critic_logit,
    mi_lower_bound,
    reweighted_nce_objective,
)
from .embeddings import ProjectionHead, teacher_weight
from .finetune_eval import evaluate

log = logging.getLogger(__name__)

STATE_FORMAT = "gacd-distill-state"
STATE_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    pass


def _positive_budget():
    return AttackBudget(epsilon=8 / 255, steps=7, step_size=2 / 255, random_start=True)


@dataclass
class DistillConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.05
    lr_milestones: tuple = ()
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    k: int = 16384
    T: float = 0.1
    logit_clamp: float = 50.0
    bank_momentum: float = 0.5
    embed_dim: int = 128
    reweight: bool = True
    seed: int = 0
    positive_attack: AttackBudget = field(default_factory=_positive_budget)
    ot: OTConfig = field(default_factory=OTConfig)

    def __post_init__(self):
        if isinstance(self.positive_attack, dict):
            self.positive_attack = AttackBudget(**self.positive_attack)
        if isinstance(self.ot, dict):
            self.ot = OTConfig(**self.ot)
        self.lr_milestones = tuple(self.lr_milestones)
        for name in ("batch_size", "lr", "k", "T", "embed_dim"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.bank_momentum < 1:
            raise ValueError("bank_momentum must lie in [0, 1)")

    def critic(self, M):
        return CriticConfig(M=M, T=self.T, k=self.k, logit_clamp=self.logit_clamp)

    def to_dict(self):
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    def hash(self):
        return config_hash(self.to_dict())


@dataclass
class StepOutput:
    objective: float          # batch-mean reweighted log-likelihood (<= 0)
    loss: float               # its negation, the minimized quantity
    mean_log_posterior: float  # unweighted mean log h(t+, s+)
    mean_weight: float
    saturated: int
    weights: torch.Tensor = None
    neg_index: torch.Tensor = None
    x_pos: torch.Tensor = None


class DistillState:
    """Everything a GACD run mutates, plus the frozen teacher."""

    def __init__(self, teacher, student, teacher_head, student_head, bank, cfg, M):
        self.teacher = teacher
        self.student = student
        self.teacher_head = teacher_head
        self.student_head = student_head
        self.bank = bank
        self.cfg = cfg
        self.critic = cfg.critic(M)
        self.optimizer = torch.optim.SGD(self.trainable_parameters(), lr=cfg.lr,
                                         momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        self.scheduler = torch.optim.lr_scheduler.MultiStepLR(
            self.optimizer, list(cfg.lr_milestones), cfg.lr_gamma)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.iteration = 0
        self.epoch = 0
        self.stats = Counter()
        self.history = []

    @classmethod
    def create(cls, teacher, student, labels, cfg):
        """Fresh heads and bank for ``labels`` (one per training instance)."""
        labels = torch.as_tensor(labels, dtype=torch.long)
        M = labels.shape[0]
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)
        torch.manual_seed(cfg.seed)
        teacher_head = ProjectionHead(teacher.feature_dim, cfg.embed_dim)
        student_head = ProjectionHead(student.feature_dim, cfg.embed_dim)
        bank = MemoryBank.init(M, cfg.embed_dim, labels, seed=cfg.seed,
                               momentum=cfg.bank_momentum)
        return cls(teacher, student, teacher_head, student_head, bank, cfg, M)

    def trainable_parameters(self):
        return (list(self.student.parameters()) + list(self.student_head.parameters())
                + list(self.teacher_head.parameters()))

    def state_dict(self):
        return {
            "format": STATE_FORMAT,
            "version": STATE_VERSION,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "student": self.student.state_dict(),
            "teacher_head": self.teacher_head.state_dict(),
            "student_head": self.student_head.state_dict(),
            "bank": self.bank.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "generator": self.generator.get_state(),
            "iteration": self.iteration,
            "epoch": self.epoch,
            "stats": dict(self.stats),
            "history": list(self.history),
            "teacher_hash": state_hash(self.teacher),
        }

    def load_state_dict(self, state):
        if state.get("format") != STATE_FORMAT or state.get("version") != STATE_VERSION:
            raise ValueError("not a compatible distillation state")
        if state["config_hash"] != self.cfg.hash():
            raise ValueError("distillation state was produced with a different config")
        if state["teacher_hash"] != state_hash(self.teacher):
            raise ValueError("distillation state was produced with a different teacher")
        self.student.load_state_dict(state["student"])
        self.teacher_head.load_state_dict(state["teacher_head"])
        self.student_head.load_state_dict(state["student_head"])
        self.bank = MemoryBank.from_state_dict(state["bank"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.generator.set_state(state["generator"])
        self.iteration = state["iteration"]
        self.epoch = state["epoch"]
        self.stats = Counter(state["stats"])
        self.history = list(state["history"])

    def save(self, path):
        torch_save_atomic(self.state_dict(), path)


def contrastive_terms(state, x_pos, y, neg_index):
    """Teacher weights, anchors, positives and negatives for one batch."""
    with torch.no_grad():
        t_feats = state.teacher.features(x_pos)
        t_logits = state.teacher.fc(t_feats)
    if state.cfg.reweight:
        weights = teacher_weight(t_logits, y).to(t_feats.dtype)
    else:
        weights = torch.ones(len(y), dtype=t_feats.dtype)
    t = state.teacher_head(t_feats)
    s = state.student_head(state.student.features(x_pos))
    s_neg = state.bank.memory[neg_index]
    return weights, t, s, s_neg


def distill_step(state, batch, cfg=None):
    """One GACD update on ``batch = (x, y, instance_index)``."""
    cfg = cfg or state.cfg
    x, y, index = batch
    if len(y) == 0:
        raise ValueError("empty batch")
    rng_before = state.generator.get_state()
    state.student.eval()
    x_pos = feature_scatter_positive(state.student.features, x, cfg.positive_attack, cfg.ot,
                                     generator=state.generator, stats=state.stats)
    neg_index = state.bank.sample_indices(y, cfg.k, generator=state.generator)
    state.student.train()
    weights, t, s, s_neg = contrastive_terms(state, x_pos, y, neg_index)
    per_anchor = reweighted_nce_objective(t, s, s_neg, weights, state.critic)
    objective = per_anchor.mean()
    loss = -objective
    if not torch.isfinite(loss):
        state.generator.set_state(rng_before)
        raise NonFiniteLossError("non-finite distillation loss; step rolled back")
    saturated = count_saturated(t.detach(), s.detach(), s_neg, state.critic)
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.bank.update(index, s.detach())
    with torch.no_grad():
        log_post = F.logsigmoid(critic_logit(t, s, state.critic)).mean()
    state.iteration += 1
    state.stats["saturated"] += saturated
    return StepOutput(
        objective=objective.item(), loss=loss.item(), mean_log_posterior=log_post.item(),
        mean_weight=weights.mean().item(), saturated=saturated,
        weights=weights.detach(), neg_index=neg_index, x_pos=x_pos,
    )


def _check_classes(teacher, dataset):
    if teacher.fc.out_features != dataset.num_classes:
        raise ValueError(
            f"teacher predicts {teacher.fc.out_features} classes but "
            f"{dataset.name} has {dataset.num_classes}")


def _write_metrics(path, records):
    atomic_write_text(path, "".join(json.dumps(r) + "\n" for r in records))


def distill_train(teacher, student, dataset, cfg, out_dir=None, resume=False, stop_after=None,
                  run_hash=None):
    """Run GACD for ``cfg.epochs`` epochs over ``dataset.train``.

    With ``out_dir``, ``distill_state.pt`` is saved after every epoch and
    ``metrics.jsonl`` (one record per finished epoch) is rewritten from the
    state history, so a resumed run never duplicates records.
    ``stop_after`` ends early after that many epochs (for staged runs).
    Records carry ``run_hash`` (default: the distillation config hash).
    Returns ``(state, metrics)``.
    """
    _check_classes(teacher, dataset)
    if cfg.k >= len(dataset.train):
        raise ValueError(f"k={cfg.k} must be smaller than the {len(dataset.train)} instances")
    teacher_report = evaluate(teacher, dataset.test, dataset=dataset.name, model_id="teacher")
    log.info("teacher natural accuracy %.2f%%", teacher_report.natural_acc)
    teacher_before = state_hash(teacher)

    state = DistillState.create(teacher, student, dataset.train.labels, cfg)
    out = Path(out_dir) if out_dir is not None else None
    state_path = out / "distill_state.pt" if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if resume and state_path is not None and state_path.exists():
        state.load_state_dict(torch.load(state_path, map_location="cpu", weights_only=False))
        log.info("resumed at epoch %d", state.epoch)
    if out:
        _write_metrics(out / "metrics.jsonl", state.history)

    while state.epoch < cfg.epochs:
        if stop_after is not None and state.epoch >= stop_after:
            break
        started = time.time()
        n = ll_sum = lp_sum = w_sum = 0.0
        for x, y, idx in dataset.train.batches(cfg.batch_size, shuffle=True,
                                               generator=state.generator):
            step = distill_step(state, (x, y, idx), cfg)
            b = len(y)
            n += b
            ll_sum += step.objective * b
            lp_sum += step.mean_log_posterior * b
            w_sum += step.mean_weight * b
        state.scheduler.step()
        state.epoch += 1
        record = {
            "epoch": state.epoch,
            "loss": -ll_sum / n,
            "objective": ll_sum / n,
            "mean_log_posterior": lp_sum / n,
            "mi_lower_bound": mi_lower_bound(lp_sum / n, cfg.k),
            "mean_weight": w_sum / n,
            "saturated": state.stats["saturated"],
            "wall_time": time.time() - started,
            "config_hash": run_hash or cfg.hash(),
        }
        state.history.append(record)
        log.info("epoch %d  -l=%.4f  MI>=%.3f", state.epoch, record["loss"],
                 record["mi_lower_bound"])
        if out:
            state.save(state_path)
            _write_metrics(out / "metrics.jsonl", state.history)

    if state_hash(teacher) != teacher_before:
        raise RuntimeError("teacher parameters changed during distillation")
    return state, list(state.history)


@dataclass
class KDConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.05
    lr_milestones: tuple = ()
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    temperature: float = 4.0
    alpha: float = 0.9
    seed: int = 0

    def __post_init__(self):
        self.lr_milestones = tuple(self.lr_milestones)
        if self.temperature <= 0 or not 0 <= self.alpha <= 1:
            raise ValueError("need temperature > 0 and alpha in [0, 1]")


def kd_loss(student_logits, teacher_logits, labels, temperature, alpha):
    """alpha * T^2 * KL(teacher_T || student_T) + (1 - alpha) * CE(student, labels)."""
    log_p_s = F.log_softmax(student_logits / temperature, dim=1)
    p_t = F.softmax(teacher_logits / temperature, dim=1)
    soft = F.kl_div(log_p_s, p_t, reduction="batchmean") * temperature ** 2
    if alpha == 1.0:
        return soft
    return alpha * soft + (1 - alpha) * F.cross_entropy(student_logits, labels)


def kd_baseline_train(teacher, student, dataset, cfg, out_dir=None, run_hash=None):
    """Soft-label distillation on clean training images. Returns per-epoch losses."""
    _check_classes(teacher, dataset)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher_before = state_hash(teacher)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.SGD(student.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(cfg.lr_milestones), cfg.lr_gamma)
    history = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for x, y, _ in dataset.train.batches(cfg.batch_size, shuffle=True, generator=gen):
            with torch.no_grad():
                t_logits = teacher(x)
            student.train()
            loss = kd_loss(student(x), t_logits, y, cfg.temperature, cfg.alpha)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(y)
        sched.step()
        history.append({"epoch": epoch + 1, "loss": total / len(dataset.train),
                        "config_hash": run_hash or config_hash(asdict(cfg))})
    student.eval()
    if state_hash(teacher) != teacher_before:
        raise RuntimeError("teacher parameters changed during KD")
    if out_dir is not None:
        _write_metrics(Path(out_dir) / "metrics.jsonl", history)
    return history


def copy_model(model):
    return copy.deepcopy(model)
