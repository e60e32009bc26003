"""Teacher/student logit-correlation comparison and feature dumps.

Feature dump format (comma separated, UTF-8):

    # gacd-features config_hash=<hash> dim=<D>
    sample_id,true_class,variant,f0,f1,...,f<D-1>
    17,2,natural,0.31,...

``sample_id`` is the index into the source split, ``variant`` is ``natural``
or ``adversarial`` and ``f*`` are penultimate activations.
"""
import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .artifacts import atomic_write_text
from .attacks import AttackBudget, pgd_attack

log = logging.getLogger(__name__)


@dataclass
class CorrelationMatrix:
    """K x K Pearson correlations between logit channels over a split."""

    values: torch.Tensor
    class_names: list = None
    zero_variance: list = field(default_factory=list)

    @property
    def num_classes(self):
        return self.values.shape[0]

    @property
    def degenerate(self):
        """True when some logit channel had zero variance."""
        return bool(self.zero_variance)


def pearson_matrix(logits, class_names=None):
    """Correlation matrix of the columns of ``logits`` (N x K).

    A channel with zero variance correlates 0 with every other channel and is
    listed in ``zero_variance``.
    """
    z = torch.as_tensor(logits).detach().double()
    if z.dim() != 2 or z.shape[0] < 2 or z.shape[1] < 2:
        raise ValueError(f"need at least 2 samples and 2 classes, got shape {tuple(z.shape)}")
    if not torch.isfinite(z).all():
        raise ValueError("logits contain non-finite values")
    z = z - z.mean(0, keepdim=True)
    sd = z.pow(2).sum(0).sqrt()
    flat = sd <= 1e-12 * (1.0 + z.abs().max())
    sd_safe = torch.where(flat, torch.ones_like(sd), sd)
    zn = z / sd_safe
    corr = zn.T @ zn
    corr[flat, :] = 0.0
    corr[:, flat] = 0.0
    corr = (0.5 * (corr + corr.T)).clamp(-1.0, 1.0)
    corr.fill_diagonal_(1.0)
    zero = torch.nonzero(flat).flatten().tolist()
    if zero:
        log.warning("zero-variance logit channels %s; their correlations set to 0", zero)
    return CorrelationMatrix(corr, class_names, zero)


@torch.no_grad()
def _logits(model, x):
    return model(x)


def collect_logits(model, split, budget=None, attack_model=None, batch_size=256, seed=0):
    """Logits of ``model`` over a split, optionally on PGD inputs.

    Adversarial inputs are crafted against ``attack_model`` (default: the
    model itself), so several models can be compared on shared inputs.
    """
    if len(split) == 0:
        raise ValueError("empty split")
    model.eval()
    source = attack_model if attack_model is not None else model
    gen = torch.Generator().manual_seed(seed)
    out = []
    for x, y, _ in split.batches(batch_size):
        if budget is not None:
            x = pgd_attack(source, x, y, budget, generator=gen)
        out.append(_logits(model, x))
    return torch.cat(out)


def logits_correlation(model, split, budget=None, attack_model=None, class_names=None,
                       batch_size=256, seed=0):
    return pearson_matrix(collect_logits(model, split, budget, attack_model, batch_size, seed),
                          class_names)


def correlation_difference(teacher, student):
    """``|teacher - student|`` and its mean over off-diagonal entries."""
    a = teacher.values if isinstance(teacher, CorrelationMatrix) else torch.as_tensor(teacher)
    b = student.values if isinstance(student, CorrelationMatrix) else torch.as_tensor(student)
    if a.shape != b.shape or a.dim() != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"correlation matrices differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = (a.double() - b.double()).abs()
    K = diff.shape[0]
    off = ~torch.eye(K, dtype=torch.bool)
    return diff, float(diff[off].mean())


def format_grid(matrix, class_names=None, config_hash=None):
    """Dense CSV grid with a label column and header row."""
    values = matrix.values if isinstance(matrix, CorrelationMatrix) else torch.as_tensor(matrix)
    if class_names is None and isinstance(matrix, CorrelationMatrix):
        class_names = matrix.class_names
    K = values.shape[0]
    names = list(class_names) if class_names is not None else [str(i) for i in range(K)]
    buf = io.StringIO()
    buf.write(f"# gacd-grid config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class"] + names)
    for name, row in zip(names, values.tolist()):
        w.writerow([name] + [f"{v:.12g}" for v in row])
    return buf.getvalue()


def save_grid(path, matrix, class_names=None, config_hash=None):
    atomic_write_text(path, format_grid(matrix, class_names, config_hash))


@dataclass
class SampleGroup:
    """``count`` random test images of class ``cls``.

    Adversarial groups run a targeted PGD towards ``target`` (untargeted when
    ``target`` is None). Groups of the same class draw from one shuffled
    order, so an adversarial group reuses the images of a natural one.
    """

    cls: int
    count: int
    adversarial: bool = False
    target: int = None


def confusion_pair_spec(natural_cls, attacked_cls, count=100):
    """Two natural groups plus adversarial versions of the second, pushed to the first."""
    return [
        SampleGroup(natural_cls, count),
        SampleGroup(attacked_cls, count),
        SampleGroup(attacked_cls, count, adversarial=True, target=natural_cls),
    ]


def _targeted_loss(target):
    def loss_fn(logits, y):
        return -F.cross_entropy(logits, torch.full_like(y, target), reduction="none")
    return loss_fn


def export_features(model, split, groups, path=None, budget=None, seed=0, config_hash=None,
                    batch_size=256):
    """Penultimate features for each sample group, written as a delimited dump.

    Returns ``(text, stats)`` where ``stats`` counts written and omitted rows.
    Samples whose attack aborts on a non-finite gradient are left out.
    """
    labels = split.labels
    num_classes = int(model.fc.out_features)
    for g in groups:
        if not 0 <= g.cls < num_classes or (g.target is not None and not 0 <= g.target < num_classes):
            raise ValueError(f"class out of range in {g}")
        if g.count < 0:
            raise ValueError("negative sample count")
    budget = budget or AttackBudget(steps=20)
    gen = torch.Generator().manual_seed(seed)
    orders = {}
    for c in sorted({g.cls for g in groups}):
        pool = torch.nonzero(labels == c).flatten()
        orders[c] = pool[torch.randperm(pool.numel(), generator=gen)]

    model.eval()
    buf = io.StringIO()
    buf.write(f"# gacd-features config_hash={config_hash} dim={model.feature_dim}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "true_class", "variant"]
               + [f"f{i}" for i in range(model.feature_dim)])
    stats = Counter()
    for g in groups:
        if g.count > orders[g.cls].numel():
            raise ValueError(f"class {g.cls} has only {orders[g.cls].numel()} samples, "
                             f"requested {g.count}")
        idx = orders[g.cls][:g.count]
        for start in range(0, len(idx), batch_size):
            bidx = idx[start:start + batch_size]
            x, y = split.images[bidx], labels[bidx]
            keep = torch.ones(len(bidx), dtype=torch.bool)
            if g.adversarial:
                attack_stats = Counter()
                loss_fn = _targeted_loss(g.target) if g.target is not None else None
                xa = pgd_attack(model, x, y, budget, loss_fn=loss_fn, generator=gen,
                                stats=attack_stats)
                keep[attack_stats.get("failed_index", [])] = False
                x = xa
            with torch.no_grad():
                feats = model.features(x)
            variant = "adversarial" if g.adversarial else "natural"
            for i, f, lab, k in zip(bidx.tolist(), feats.tolist(), y.tolist(), keep.tolist()):
                if not k:
                    stats["omitted"] += 1
                    continue
                w.writerow([i, lab, variant] + [f"{v:.9g}" for v in f])
                stats["rows"] += 1
    if stats["omitted"]:
        log.warning("feature export omitted %d samples after attack failures", stats["omitted"])
    text = buf.getvalue()
    if path is not None:
        atomic_write_text(path, text)
    return text, stats


def read_feature_dump(path_or_text):
    """Parse a dump back into (header comment, rows as dicts)."""
    text = path_or_text
    if "\n" not in str(path_or_text):
        with open(path_or_text, encoding="utf-8") as fh:
            text = fh.read()
    lines = text.splitlines()
    comment = lines[0] if lines and lines[0].startswith("#") else None
    body = lines[1:] if comment else lines
    return comment, list(csv.DictReader(body))
