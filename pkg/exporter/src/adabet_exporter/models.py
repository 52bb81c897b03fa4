"""Built-in demo models for the export command line.

Each builder returns (model, input_shape, n_classes, default_group_rules).
Weights come from torch's global RNG, so seed before building for
reproducible dumps.
"""

import torch
from torch import nn

__all__ = ["MODELS", "TinyAttention", "build_attention", "build_cnn", "build_mlp"]


class TinyAttention(nn.Module):
    """Single-head self-attention over a short token sequence, then a
    classifier head on the flattened block output."""

    def __init__(self, tokens=4, width=8, classes=4):
        super().__init__()
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)
        self.head = nn.Linear(tokens * width, classes)
        self.scale = width ** -0.5

    def forward(self, x):
        q, k, v = self.q_proj(x), self.k_proj(x), self.v_proj(x)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        mixed = self.out_proj(attn @ v)
        return self.head(mixed.flatten(1))


def build_mlp():
    model = nn.Sequential(
        nn.Linear(16, 32), nn.ReLU(),
        nn.Linear(32, 32), nn.ReLU(),
        nn.Linear(32, 4),
    )
    return model, (16,), 4, ()


def build_cnn():
    model = nn.Sequential(
        nn.Conv2d(1, 4, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(4, 8, 3, padding=1), nn.ReLU(), nn.Flatten(),
        nn.Linear(8 * 4 * 4, 4),
    )
    return model, (1, 8, 8), 4, ()


def build_attention():
    rules = ((r"(?:^|\.)(?:q|k|v|out)_proj$", "attn"),)
    return TinyAttention(), (4, 8), 4, rules


MODELS = {
    "mlp": build_mlp,
    "cnn": build_cnn,
    "attn": build_attention,
}
