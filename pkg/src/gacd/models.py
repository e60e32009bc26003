"""Classifier backbones exposing penultimate features.

Every model has ``features(x)`` (penultimate activations), a linear ``fc``
head, ``feature_dim`` and ``input_size``; ``forward`` is ``fc(features(x))``.
"""
import torch
import torch.nn as nn


class SmallCNN(nn.Module):
    """Three conv/pool stages and one hidden dense layer; 32x32 RGB input."""

    input_size = 32
    input_mean = 0.5
    input_scale = 4.0

    def __init__(self, num_classes=10, width=16, feature_dim=64):
        super().__init__()
        w = width
        self.body = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 4 * w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Flatten(),
            nn.Linear(4 * w * 16, feature_dim), nn.ReLU(),
        )
        self.feature_dim = feature_dim
        self.fc = nn.Linear(feature_dim, num_classes)

    def features(self, x):
        return self.body((x - self.input_mean) * self.input_scale)

    def forward(self, x):
        return self.fc(self.features(x))


class CifarResNet18(nn.Module):
    """torchvision ResNet-18 with a 3x3 stem and no max-pool, for 32x32 input."""

    input_size = 32

    def __init__(self, num_classes=10):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(num_classes=num_classes)
        net.conv1 = nn.Conv2d(3, 64, 3, 1, 1, bias=False)
        net.maxpool = nn.Identity()
        self.fc = net.fc
        net.fc = nn.Identity()
        self.net = net
        self.feature_dim = 512

    def features(self, x):
        return self.net(x)

    def forward(self, x):
        return self.fc(self.features(x))


ARCHITECTURES = {
    "small_cnn": lambda num_classes, **kw: SmallCNN(num_classes, **kw),
    "resnet18": lambda num_classes, **kw: CifarResNet18(num_classes, **kw),
}


def build_model(arch, num_classes, seed=None, **kwargs):
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
    if seed is not None:
        torch.manual_seed(seed)
    return ARCHITECTURES[arch](num_classes, **kwargs)


def reset_head(model, seed=None):
    """Fresh classification head (same shape)."""
    if seed is not None:
        torch.manual_seed(seed)
    model.fc.reset_parameters()
    return model
