"""Noise-contrastive critic, sample-reweighted objective and memory bank.

The critic scores a (teacher, student) embedding pair as

    h(t, s) = exp(t.s / T) / (exp(t.s / T) + k / M)
            = sigmoid(t.s / T - log(k / M))

and everything here works with the logit form so no exponential overflows.
"""
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

DEFAULT_LOGIT_CLAMP = 50.0


@dataclass
class CriticConfig:
    """Temperature ``T``, negatives per anchor ``k`` and dataset size ``M``."""

    M: int
    T: float = 0.1
    k: int = 16384
    logit_clamp: float = DEFAULT_LOGIT_CLAMP

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"temperature must be positive, got {self.T}")
        if not 1 <= self.k < self.M:
            raise ValueError(f"need 1 <= k < M, got k={self.k}, M={self.M}")
        if not self.logit_clamp > 0:
            raise ValueError("logit_clamp must be positive")

    @property
    def log_noise_ratio(self):
        return math.log(self.k / self.M)


def critic_logit(t, s, cfg, clamp=True):
    """Logit of the critic, ``t.s / T - log(k/M)``, over the last dimension."""
    t = torch.as_tensor(t)
    s = torch.as_tensor(s)
    if t.shape[-1] != s.shape[-1]:
        raise ValueError(f"embedding dims differ: {t.shape[-1]} vs {s.shape[-1]}")
    z = (t * s).sum(-1) / cfg.T - cfg.log_noise_ratio
    if clamp:
        z = z.clamp(-cfg.logit_clamp, cfg.logit_clamp)
    return z


def critic_h(t, s, cfg):
    """Posterior estimate that (t, s) is a congruent pair; strictly in (0, 1).

    sigmoid(50) rounds to 1.0 in float64, so the value is capped at the
    largest float below one.
    """
    h = torch.sigmoid(critic_logit(t, s, cfg))
    return h.clamp(max=float(torch.nextafter(torch.tensor(1.0, dtype=h.dtype),
                                             torch.tensor(0.0, dtype=h.dtype))))


def count_saturated(t, s_pos, s_neg, cfg):
    """Number of critic logits whose magnitude exceeds the clamp bound."""
    with torch.no_grad():
        zp = critic_logit(t, s_pos, cfg, clamp=False)
        zn = critic_logit(t.unsqueeze(-2), s_neg, cfg, clamp=False)
        bound = cfg.logit_clamp
        return int((zp.abs() > bound).sum() + (zn.abs() > bound).sum())


def reweighted_nce_objective(t, s_pos, s_neg, weight, cfg):
    """Per-anchor reweighted log-likelihood of one congruent and k incongruent pairs.

    Args:
        t: teacher anchors, shape (..., d).
        s_pos: student positives, shape (..., d).
        s_neg: student negatives, shape (..., k, d).
        weight: teacher weights, shape (...) or scalar.
        cfg: CriticConfig.

    Returns:
        ``w * [log h(t, s+) + sum_i log(1 - h(t, s_i-))]`` with shape (...).
        Always <= 0. The trainer minimizes the negated batch mean.
    """
    t = torch.as_tensor(t)
    z_pos = critic_logit(t, s_pos, cfg)
    z_neg = critic_logit(t.unsqueeze(-2), s_neg, cfg)
    ll = F.logsigmoid(z_pos) + F.logsigmoid(-z_neg).sum(-1)
    return torch.as_tensor(weight, dtype=ll.dtype, device=ll.device) * ll


def reweighted_nce_grad(t, s_pos, s_neg, weight, cfg):
    """Closed-form gradients of the (unclamped) objective.

    Returns a tuple ``(d_t, d_s_pos, d_s_neg)`` of gradients of the objective
    (not its negation) for one or many anchors. Valid where no logit hits the
    clamp bound.
    """
    t = torch.as_tensor(t)
    w = torch.as_tensor(weight, dtype=t.dtype)
    h_pos = torch.sigmoid(critic_logit(t, s_pos, cfg, clamp=False))
    h_neg = torch.sigmoid(critic_logit(t.unsqueeze(-2), s_neg, cfg, clamp=False))
    # d/dz log sigmoid(z) = 1 - sigmoid(z); d/dz log sigmoid(-z) = -sigmoid(z)
    g_pos = (w * (1.0 - h_pos)).unsqueeze(-1) / cfg.T
    g_neg = -(w.unsqueeze(-1) * h_neg).unsqueeze(-1) / cfg.T
    d_s_pos = g_pos * t
    d_s_neg = g_neg * t.unsqueeze(-2)
    d_t = g_pos * s_pos + (g_neg * s_neg).sum(-2)
    return d_t, d_s_pos, d_s_neg


def mi_lower_bound(expected_log_posterior, k):
    """``log(k) + E[log q(C=1 | t, s)]`` in nats."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return math.log(k) + float(expected_log_posterior)


class MemoryBank:
    """Per-instance store of unit-norm student embeddings with class labels.

    Slots are updated with momentum, ``slot <- normalize(m*old + (1-m)*new)``,
    and negatives are drawn uniformly with replacement from instances whose
    label differs from the anchor's.
    """

    def __init__(self, memory, labels, momentum=0.5):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        memory = torch.as_tensor(memory)
        labels = torch.as_tensor(labels, dtype=torch.long)
        if memory.dim() != 2 or memory.shape[0] != labels.shape[0]:
            raise ValueError("memory must be (M, d) with one label per slot")
        self.memory = memory
        self._labels = labels.clone()
        self._labels.requires_grad_(False)
        self.momentum = float(momentum)

    @classmethod
    def init(cls, M, d, labels, seed=0, momentum=0.5, dtype=torch.float32):
        """Fill ``M`` slots with seeded isotropic Gaussian draws, normalized."""
        labels = torch.as_tensor(labels, dtype=torch.long)
        if M <= 0 or labels.shape[0] != M:
            raise ValueError(f"need M > 0 and {M} labels, got {labels.shape[0]}")
        gen = torch.Generator().manual_seed(int(seed))
        mem = torch.randn(M, d, generator=gen, dtype=torch.float64)
        mem = F.normalize(mem, dim=1).to(dtype)
        return cls(mem, labels, momentum)

    @property
    def labels(self):
        return self._labels.clone()

    def __len__(self):
        return self.memory.shape[0]

    @property
    def dim(self):
        return self.memory.shape[1]

    def eligible(self, anchor_class):
        return torch.nonzero(self._labels != int(anchor_class)).squeeze(1)

    def sample_indices(self, anchor_classes, k, generator=None, replacement=True):
        """Negative indices of shape (len(anchor_classes), k), one row per anchor."""
        anchor_classes = torch.as_tensor(anchor_classes, dtype=torch.long).reshape(-1)
        rows = []
        for c in anchor_classes.tolist():
            pool = self.eligible(c)
            if pool.numel() == 0:
                raise ValueError(f"no instances outside class {c} to use as negatives")
            if replacement:
                pick = torch.randint(pool.numel(), (k,), generator=generator)
            else:
                if pool.numel() < k:
                    raise ValueError(
                        f"only {pool.numel()} instances outside class {c}, need {k}"
                    )
                pick = torch.randperm(pool.numel(), generator=generator)[:k]
            rows.append(pool[pick])
        return torch.stack(rows)

    def sample_negatives(self, anchor_class, k, generator=None, replacement=True):
        """k stored embeddings from classes other than ``anchor_class`` plus their indices."""
        idx = self.sample_indices([anchor_class], k, generator, replacement)[0]
        return self.memory[idx].clone(), idx

    def update(self, index, new_embedding, momentum=None):
        """Momentum-update one slot (int index) or several (index tensor)."""
        m = self.momentum if momentum is None else float(momentum)
        index = torch.as_tensor(index, dtype=torch.long)
        if ((index < 0) | (index >= len(self))).any():
            raise IndexError(f"bank index out of range [0, {len(self)})")
        new = torch.as_tensor(new_embedding, dtype=self.memory.dtype).detach()
        with torch.no_grad():
            if m == 0.0:
                self.memory[index] = new
                return
            mixed = m * self.memory[index] + (1.0 - m) * new
            self.memory[index] = F.normalize(mixed, dim=-1)

    def state_dict(self):
        return {"memory": self.memory.clone(), "labels": self._labels.clone(),
                "momentum": self.momentum}

    @classmethod
    def from_state_dict(cls, state):
        return cls(state["memory"].clone(), state["labels"].clone(), state["momentum"])
