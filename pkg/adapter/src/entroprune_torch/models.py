"""Reference PyTorch models whose layer names match the toolkit fixtures."""

from __future__ import annotations

from collections import OrderedDict

import torch
import torch.nn as nn

VGG16_WIDTHS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
_VGG_POOL_AFTER = {1, 3, 6, 9, 12}


def build_lenet(conv1_out: int = 16, fc1_out: int = 120, fc2_out: int = 84,
                num_classes: int = 10) -> nn.Sequential:
    return nn.Sequential(OrderedDict([
        ("conv0", nn.Conv2d(1, 6, 5, padding=2)),
        ("relu0", nn.ReLU()),
        ("pool0", nn.AvgPool2d(2, 2)),
        ("conv1", nn.Conv2d(6, conv1_out, 5)),
        ("relu1", nn.ReLU()),
        ("pool1", nn.AvgPool2d(2, 2)),
        ("flatten", nn.Flatten()),
        ("fc1", nn.Linear(25 * conv1_out, fc1_out)),
        ("relu2", nn.ReLU()),
        ("fc2", nn.Linear(fc1_out, fc2_out)),
        ("relu3", nn.ReLU()),
        ("fc3", nn.Linear(fc2_out, num_classes)),
    ]))


def build_vgg16(widths=VGG16_WIDTHS, num_classes: int = 10) -> nn.Sequential:
    widths = tuple(int(w) for w in widths)
    layers: list[tuple[str, nn.Module]] = []
    in_ch = 3
    pool = 0
    for i, out_ch in enumerate(widths):
        layers.append((f"conv{i}", nn.Conv2d(in_ch, out_ch, 3, padding=1)))
        layers.append((f"bn{i}", nn.BatchNorm2d(out_ch)))
        layers.append((f"relu{i}", nn.ReLU()))
        if i in _VGG_POOL_AFTER:
            layers.append((f"pool{pool}", nn.MaxPool2d(2, 2)))
            pool += 1
        in_ch = out_ch
    layers.append(("flatten", nn.Flatten()))
    layers.append(("fc", nn.Linear(widths[-1], num_classes)))
    return nn.Sequential(OrderedDict(layers))


class BasicBlock(nn.Module):
    """Two 3x3 convs with a residual connection; 1x1 conv + BN shortcut when
    the width or stride changes. The exporter expands this into the
    toolkit's residual_begin/residual_add records."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv_a = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn_a = nn.BatchNorm2d(out_ch)
        self.relu_a = nn.ReLU()
        self.conv_b = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn_b = nn.BatchNorm2d(out_ch)
        self.relu_out = nn.ReLU()
        if stride != 1 or in_ch != out_ch:
            self.shortcut_conv = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)
            self.shortcut_bn = nn.BatchNorm2d(out_ch)
        else:
            self.shortcut_conv = None
            self.shortcut_bn = None

    def forward(self, x):
        out = self.bn_b(self.conv_b(self.relu_a(self.bn_a(self.conv_a(x)))))
        branch = x
        if self.shortcut_conv is not None:
            branch = self.shortcut_bn(self.shortcut_conv(x))
        return self.relu_out(out + branch)


def build_resnet18(num_classes: int = 10) -> nn.Sequential:
    layers: list[tuple[str, nn.Module]] = [
        ("conv0", nn.Conv2d(3, 64, 3, padding=1, bias=False)),
        ("bn0", nn.BatchNorm2d(64)),
        ("relu0", nn.ReLU()),
    ]
    plan = [(1, 64, 64, 1), (3, 64, 64, 1), (5, 64, 128, 2), (7, 128, 128, 1),
            (9, 128, 256, 2), (11, 256, 256, 1), (13, 256, 512, 2), (15, 512, 512, 1)]
    for first, in_ch, out_ch, stride in plan:
        layers.append((f"block{first}", BasicBlock(in_ch, out_ch, stride)))
    layers.append(("pool", nn.AvgPool2d(4, 4)))
    layers.append(("flatten", nn.Flatten()))
    layers.append(("fc", nn.Linear(512, num_classes)))
    return nn.Sequential(OrderedDict(layers))
