"""Independent reference implementations used only by the tests.

They are written from the layer definitions directly, without sharing code
with the package, so agreement is evidence rather than tautology.
"""

import math


def conv_out(n, stride):
    return math.ceil(n / stride)


class Net:
    def __init__(self):
        self.macs = 0
        self.params = 0

    def conv(self, cin, cout, k, hw, stride=1, groups=1, bn=True, bias=False):
        h, w = conv_out(hw[0], stride), conv_out(hw[1], stride)
        self.macs += h * w * cout * (cin // groups if cin % groups == 0 else cin / groups) * k * k
        self.params += cout * cin * k * k / groups + (2 * cout if bn else 0) + (cout if bias else 0)
        return (h, w)

    def fc(self, cin, cout):
        self.macs += cin * cout
        self.params += cin * cout + cout


def torchvision_resnet(blocks, bottleneck, width_per_group=64, groups=1, res=224, classifier=True):
    """MACs and params of a torchvision-style ResNet/ResNeXt."""
    n = Net()
    hw = n.conv(3, 64, 7, (res, res), stride=2)
    hw = (conv_out(hw[0], 2), conv_out(hw[1], 2))
    cin = 64
    for stage, count in enumerate(blocks):
        planes = 64 * 2**stage
        for b in range(count):
            stride = 2 if (b == 0 and stage > 0) else 1
            if bottleneck:
                width = int(planes * width_per_group / 64) * groups
                out = planes * 4
                n.conv(cin, width, 1, hw)
                new = n.conv(width, width, 3, hw, stride, groups)
                n.conv(width, out, 1, new)
            else:
                out = planes
                new = n.conv(cin, planes, 3, hw, stride)
                n.conv(planes, planes, 3, new)
            if stride != 1 or cin != out:
                n.conv(cin, out, 1, hw, stride)
            hw, cin = new, out
    if classifier:
        n.fc(cin, 1000)
    return n.macs, n.params


def encoded_basicblock(base, stages, res=(224, 224), classifier=True):
    """MACs and params of an encoded basicblock backbone under the stem
    convention: 3x3 s2 conv 3->base, 3x3 s2 conv base->base, first block of
    stages 3-5 strided, code 2 doubles the width."""
    n = Net()
    hw = n.conv(3, base, 3, res, 2)
    hw = n.conv(base, base, 3, hw, 2)
    cin = width = base
    for si, stage in enumerate(stages):
        for bi, code in enumerate(stage):
            stride = 2 if bi == 0 and si > 0 else 1
            width = width * 2 if code == 2 else width
            new = n.conv(cin, width, 3, hw, stride)
            n.conv(width, width, 3, new)
            if stride != 1 or cin != width:
                n.conv(cin, width, 1, hw, stride)
            hw, cin = new, width
    if classifier:
        n.fc(cin, 1000)
    return n.macs, n.params


def fc2_macs(c, rois, stages=1):
    per_roi = 7 * 7 * c * 1024 + 1024 * 1024 + 1024 * 81 + 1024 * 320
    return per_roi * rois * stages


def rpn_level_macs(c, h, w, ga=False):
    extra = c * 3 if ga else 0
    return h * w * (9 * c * c + c * 3 + c * 12 + extra)


def pareto_front_bruteforce(points):
    """Indices of points no other point dominates (cost low, accuracy high)."""
    out = []
    for i, (ci, ai) in enumerate(points):
        beaten = False
        for j, (cj, aj) in enumerate(points):
            if j != i and cj <= ci and aj >= ai and (cj < ci or aj > ai):
                beaten = True
                break
        if not beaten:
            out.append(i)
    return out


def pearson_direct(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)
