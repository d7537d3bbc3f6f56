"""Single-head classifiers over the full class vocabulary (class id c -> logit c - 1)."""
import torch
import torch.nn as nn
import torch.nn.functional as F


class MLPClassifier(nn.Module):
    def __init__(self, in_dim: int, n_classes: int, hidden: int = 64):
        super().__init__()
        self.arch = dict(kind="mlp", in_dim=in_dim, n_classes=n_classes, hidden=hidden)
        self.body = nn.Sequential(nn.Linear(in_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU())
        self.head = nn.Linear(hidden, n_classes)

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.features(x))


class ConvClassifier(nn.Module):
    def __init__(self, channels: int, n_classes: int, spatial=(8, 8), hidden: int = 64, width: int = 16):
        super().__init__()
        h, w = spatial
        self.arch = dict(kind="conv", channels=channels, n_classes=n_classes, spatial=list(spatial),
                         hidden=hidden, width=width)
        self.conv1 = nn.Conv2d(channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.proj = nn.Linear(2 * width * ((h + 1) // 2) * ((w + 1) // 2), hidden)
        self.head = nn.Linear(hidden, n_classes)

    def features(self, x):
        h = F.silu(self.conv1(x))
        h = F.silu(self.conv2(h)).flatten(1)
        return F.silu(self.proj(h))

    def forward(self, x):
        return self.head(self.features(x))


def make_classifier(sample_shape, n_classes: int, hidden: int = 64) -> nn.Module:
    if len(sample_shape) == 1:
        return MLPClassifier(sample_shape[0], n_classes, hidden)
    c, h, w = sample_shape
    return ConvClassifier(c, n_classes, (h, w), hidden)


def build_classifier(arch: dict) -> nn.Module:
    arch = dict(arch)
    kind = arch.pop("kind")
    return MLPClassifier(**arch) if kind == "mlp" else ConvClassifier(**arch)


@torch.no_grad()
def accuracy(classifier, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    pred = classifier(x).argmax(dim=1) + 1
    return float((pred == y).double().mean())
