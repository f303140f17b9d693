"""50-layer residual backbone.

Layer names follow the de facto canonical serialization (conv1, bn1,
layer1..layer4, fc) so ImageNet-pretrained weight files load directly at the
default width. `base_width` scales every stage uniformly, giving a cheap
test backbone with identical depth and stride structure; `last_stride`
controls whether the final stage downsamples.
"""

import torch
import torch.nn as nn

__all__ = ["Bottleneck", "ResNet50", "load_pretrained", "WeightLoadError"]


class WeightLoadError(RuntimeError):
    """A pretrained weight file does not match the backbone architecture."""


def conv1x1(in_planes, out_planes, stride=1):
    return nn.Conv2d(in_planes, out_planes, kernel_size=1, stride=stride, bias=False)


def conv3x3(in_planes, out_planes, stride=1):
    return nn.Conv2d(in_planes, out_planes, kernel_size=3, stride=stride,
                     padding=1, bias=False)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, inplanes, planes, stride=1, downsample=None):
        super().__init__()
        self.conv1 = conv1x1(inplanes, planes)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = conv3x3(planes, planes, stride)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = conv1x1(planes, planes * self.expansion)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample
        self.stride = stride

    def forward(self, x):
        identity = x
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        if self.downsample is not None:
            identity = self.downsample(x)
        return self.relu(out + identity)


class ResNet50(nn.Module):
    """Bottleneck ResNet with the (3, 4, 6, 3) block layout.

    The classification head is omitted; the module ends at the final
    feature map of ``base_width * 32`` channels (2048 at canonical width).
    """

    def __init__(self, base_width=64, last_stride=2):
        super().__init__()
        w = base_width
        self.inplanes = w
        self.out_channels = w * 8 * Bottleneck.expansion
        self.conv1 = nn.Conv2d(3, w, kernel_size=7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(w)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        self.layer1 = self._make_layer(w, 3)
        self.layer2 = self._make_layer(w * 2, 4, stride=2)
        self.layer3 = self._make_layer(w * 4, 6, stride=2)
        self.layer4 = self._make_layer(w * 8, 3, stride=last_stride)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.constant_(m.weight, 1.0)
                nn.init.constant_(m.bias, 0.0)
        # cold starts: blocks begin as identities so activation variance does
        # not grow with depth (irrelevant when pretrained weights are loaded)
        for m in self.modules():
            if isinstance(m, Bottleneck):
                nn.init.constant_(m.bn3.weight, 0.0)

    def _make_layer(self, planes, blocks, stride=1):
        downsample = None
        if stride != 1 or self.inplanes != planes * Bottleneck.expansion:
            downsample = nn.Sequential(
                conv1x1(self.inplanes, planes * Bottleneck.expansion, stride),
                nn.BatchNorm2d(planes * Bottleneck.expansion),
            )
        layers = [Bottleneck(self.inplanes, planes, stride, downsample)]
        self.inplanes = planes * Bottleneck.expansion
        layers.extend(Bottleneck(self.inplanes, planes) for _ in range(1, blocks))
        return nn.Sequential(*layers)

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))


def load_pretrained(model: ResNet50, path):
    """Load an ImageNet-pretrained state dict, discarding the classifier.

    The file must cover every backbone layer with matching shapes; the
    first offending layer is named in the error.
    """
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise WeightLoadError(f"cannot read weight file {path}: {e}") from e
    if "state_dict" in state and isinstance(state["state_dict"], dict):
        state = state["state_dict"]

    own = model.state_dict()
    for name, tensor in own.items():
        if name.endswith("num_batches_tracked"):
            continue
        if name not in state:
            raise WeightLoadError(f"weight file {path} is missing layer {name!r}")
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise WeightLoadError(
                f"layer {name!r}: expected shape {tuple(tensor.shape)}, "
                f"file has {tuple(state[name].shape)}"
            )
    filtered = {k: v for k, v in state.items() if k in own}
    model.load_state_dict(filtered, strict=False)
    return model
