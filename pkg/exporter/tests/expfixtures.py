"""Toy torch models and batch makers shared by the exporter tests."""

import torch
from torch import nn


class SmallConv(nn.Module):
    """Two ReLU conv stages with a pooling step, then a linear head.

    Input (B, 1, 6, 6); captured layers are conv1 (post-relu, 108 elems),
    conv2 (post-relu, 54 elems), head (logits, 4 elems).
    """

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 3, 3, padding=1)
        self.act1 = nn.ReLU()
        self.pool = nn.MaxPool2d(2)
        self.conv2 = nn.Conv2d(3, 6, 3, padding=1)
        self.act2 = nn.ReLU()
        self.head = nn.Linear(6 * 3 * 3, 4)

    def forward(self, x):
        h = self.pool(self.act1(self.conv1(x)))
        h = self.act2(self.conv2(h))
        return self.head(h.flatten(1))


def small_conv(seed=0):
    torch.manual_seed(seed)
    return SmallConv()


def mlp(seed=0):
    torch.manual_seed(seed)
    return nn.Sequential(
        nn.Linear(10, 12), nn.ReLU(),
        nn.Linear(12, 12), nn.ReLU(),
        nn.Linear(12, 3),
    )


def float_batches(shape, n, batch_size, seed, classes=None):
    """A list of seeded random batches; with classes, (inputs, labels) pairs."""
    gen = torch.Generator().manual_seed(seed)
    out = []
    for _ in range(n):
        x = torch.randn((batch_size,) + tuple(shape), generator=gen)
        if classes is None:
            out.append(x)
        else:
            out.append((x, torch.randint(0, classes, (batch_size,), generator=gen)))
    return out


def conv_reference_activations(model, x):
    """Recompute SmallConv's captured activations directly, layer by layer."""
    model.eval()
    with torch.no_grad():
        a1 = torch.relu(model.conv1(x))
        a2 = torch.relu(model.conv2(model.pool(a1)))
        logits = model.head(a2.flatten(1))
    return [a1, a2, logits]
