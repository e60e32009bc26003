"""Shared teacher/student embedding space.

Backbone penultimate features are mapped by a bias-free linear head and
L2-normalized. Teacher and student get their own head with a common output
dimension.
"""
import torch
import torch.nn as nn
import torch.nn.functional as F


class DegenerateProjectionError(ValueError):
    """Raised when a projected feature vector has (numerically) zero norm."""


class ProjectionHead(nn.Module):
    """Linear map from backbone features (width ``in_dim``) to ``embed_dim``."""

    def __init__(self, in_dim, embed_dim=128, bias=False):
        super().__init__()
        self.linear = nn.Linear(in_dim, embed_dim, bias=bias)

    @property
    def in_dim(self):
        return self.linear.in_features

    @property
    def embed_dim(self):
        return self.linear.out_features

    def forward(self, feats):
        return project_and_normalize(feats, self)


def project_and_normalize(feats, head, eps=1e-12):
    """Project ``feats`` (N x D or D) with ``head`` and scale rows to unit norm.

    ``head`` may be a ``ProjectionHead``, an ``nn.Linear`` or a bare weight
    matrix of shape (d, D).
    """
    if not torch.isfinite(feats).all():
        raise ValueError("backbone features contain non-finite values")
    if isinstance(head, ProjectionHead):
        z = head.linear(feats)
    elif isinstance(head, nn.Module):
        z = head(feats)
    else:
        z = feats @ torch.as_tensor(head, dtype=feats.dtype).T
    norms = z.norm(dim=-1, keepdim=True)
    if (norms <= eps).any():
        raise DegenerateProjectionError("projection produced a zero vector")
    return z / norms


def teacher_weight(teacher_logits, true_label):
    """Softmax probability (temperature 1) the teacher assigns to the true class.

    Accepts a single logit vector with an int label, or a batch (N x K) with a
    label tensor of length N. Values lie in (0, 1].
    """
    logits = torch.as_tensor(teacher_logits)
    if not logits.is_floating_point():
        logits = logits.double()
    if not torch.isfinite(logits).all():
        raise ValueError("teacher logits contain non-finite values")
    labels = torch.as_tensor(true_label, device=logits.device)
    num_classes = logits.shape[-1]
    if ((labels < 0) | (labels >= num_classes)).any():
        raise IndexError(f"true label outside [0, {num_classes})")
    probs = F.softmax(logits, dim=-1)
    if logits.dim() == 1:
        return probs[int(labels)]
    return probs.gather(-1, labels.long().view(-1, 1)).squeeze(-1)
