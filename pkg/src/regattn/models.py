"""Networks: vanilla generator, attention branch, PatchGAN discriminator, VGG-19.

All networks consume images in model space, i.e. (N, 3, H, W) in [-1, 1].
Each module carries a ``network_id`` so checkpoints and the training loop can
tell the three trainable stores apart.
"""

from collections import OrderedDict

import torch
import torch.nn as nn

from .errors import ConfigError, InitializationError, InputError
from .weights import VGG19_ARCHIVE, load_archive

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# torchvision's vgg19().features layout; "M" is a 2x2 max-pool
_VGG19_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
              512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]


def _vgg19_layer_names():
    names, block, idx = [], 1, 1
    for v in _VGG19_CFG:
        if v == "M":
            names.append(f"pool{block}")
            block, idx = block + 1, 1
        else:
            names += [f"conv{block}_{idx}", f"relu{block}_{idx}"]
            idx += 1
    return names


VGG19_LAYERS = _vgg19_layer_names()


def check_image_batch(x, name="x"):
    if x.dim() != 4 or x.shape[1] != 3:
        raise InputError(f"{name} must have shape (N, 3, H, W), got {tuple(x.shape)}")
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise InputError(f"{name} spatial dims {tuple(x.shape[2:])} must be divisible by 4")


def init_weights(module, gain=0.02):
    """N(0, 0.02) conv weights, N(1, 0.02) batch-norm scales, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, gain)
            nn.init.zeros_(m.bias)


class VGG19Features(nn.Module):
    """Front of VGG-19 ``features`` truncated after ``last_layer``.

    Submodule indices match torchvision, so the public ImageNet archive loads
    directly. ``width`` scales every conv width; anything but 64 cannot be
    pretrained and exists for CPU-sized experiments.
    """

    def __init__(self, last_layer="relu3_3", width=64, pretrained=True,
                 weights_dir=None, normalize_input=True):
        super().__init__()
        if last_layer not in VGG19_LAYERS:
            raise ConfigError(f"unknown VGG-19 layer {last_layer!r}")
        if pretrained and width != 64:
            raise ConfigError("pretrained VGG-19 weights require width=64")
        n_keep = VGG19_LAYERS.index(last_layer) + 1
        layers, in_ch = [], 3
        for v in _VGG19_CFG:
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                out_ch = v * width // 64
                layers += [nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU(inplace=False)]
                in_ch = out_ch
        self.body = nn.Sequential(*layers[:n_keep])
        self.layer_names = VGG19_LAYERS[:n_keep]
        self.out_channels = [m.out_channels for m in self.body if isinstance(m, nn.Conv2d)][-1]
        self.normalize_input = normalize_input
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.pretrained = pretrained
        if pretrained:
            self.load_imagenet(weights_dir)
        else:
            for m in self.body:
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                    nn.init.zeros_(m.bias)

    def load_imagenet(self, weights_dir=None):
        state = load_archive(VGG19_ARCHIVE, weights_dir)
        own = self.body.state_dict()
        mapped = {}
        for key in own:
            src = f"features.{key}"
            if src not in state:
                raise InitializationError(f"VGG-19 archive lacks {src}")
            if state[src].shape != own[key].shape:
                raise InitializationError(f"VGG-19 archive {src} has shape {tuple(state[src].shape)}")
            mapped[key] = state[src]
        self.body.load_state_dict(mapped)

    def param_keys(self, prefix=""):
        return [prefix + "body." + k for k, _ in self.body.named_parameters()]

    def forward(self, x, taps=None):
        """Run the truncated net. With ``taps`` returns an ordered dict of those layers."""
        if self.normalize_input:
            x = ((x + 1.0) * 0.5 - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        if taps is None:
            return self.body(x)
        wanted = set(taps)
        missing = wanted.difference(self.layer_names)
        if missing:
            raise ConfigError(f"layers {sorted(missing)} are beyond {self.layer_names[-1]}")
        out = OrderedDict()
        for name, layer in zip(self.layer_names, self.body):
            x = layer(x)
            if name in wanted:
                out[name] = x
                if len(out) == len(wanted):
                    break
        return OrderedDict((t, out[t]) for t in taps)


class FeatureExtractor(nn.Module):
    """Frozen VGG-19 used by the perceptual self-regularization loss.

    ``forward`` returns the feature stack as an ordered ``{layer: tensor}``
    dict. Parameters never require grad, but gradients still flow to the input.
    """

    def __init__(self, layers=("relu1_2", "relu2_2", "relu3_3"), width=64,
                 pretrained=True, weights_dir=None):
        super().__init__()
        layers = tuple(layers)
        if not layers:
            raise ConfigError("reg_layers must name at least one layer")
        unknown = [l for l in layers if l not in VGG19_LAYERS]
        if unknown:
            raise ConfigError(f"unknown VGG-19 layers {unknown}")
        last = max(layers, key=VGG19_LAYERS.index)
        self.layers = layers
        self.vgg = VGG19Features(last, width=width, pretrained=pretrained, weights_dir=weights_dir)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # always inference mode; the extractor has no batch statistics anyway
        return super().train(False)

    def forward(self, x):
        return self.vgg(x, taps=self.layers)


class ResidualBlock(nn.Module):
    """Two dilated 3x3 convs with batch norm; ReLU after the skip sum."""

    def __init__(self, channels, dilation=2):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation),
            nn.BatchNorm2d(channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation),
            nn.BatchNorm2d(channels),
        )
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(x + self.block(x))


def _conv_bn_relu(cin, cout, k, stride, padding):
    return [nn.Conv2d(cin, cout, k, stride=stride, padding=padding),
            nn.BatchNorm2d(cout), nn.ReLU()]


def _deconv_bn_relu(cin, cout):
    return [nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1),
            nn.BatchNorm2d(cout), nn.ReLU()]


class Generator(nn.Module):
    """Vanilla generator G0.

    7x7 conv -> two stride-2 convs -> ``n_res_blocks`` dilated residual blocks
    -> two stride-2 deconvs -> 7x7 conv -> tanh. Output has the input's shape.
    """

    network_id = "G0"

    def __init__(self, ngf=64, n_res_blocks=9, dilation=2):
        super().__init__()
        layers = [nn.ReflectionPad2d(3)] + _conv_bn_relu(3, ngf, 7, 1, 0)
        layers += _conv_bn_relu(ngf, 2 * ngf, 3, 2, 1)
        layers += _conv_bn_relu(2 * ngf, 4 * ngf, 3, 2, 1)
        layers += [ResidualBlock(4 * ngf, dilation) for _ in range(n_res_blocks)]
        layers += _deconv_bn_relu(4 * ngf, 2 * ngf)
        layers += _deconv_bn_relu(2 * ngf, ngf)
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ngf, 3, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)
        init_weights(self)

    @property
    def final_conv(self):
        return self.model[-2]

    def forward(self, x):
        check_image_batch(x)
        return self.model(x)


class AttentionBranch(nn.Module):
    """G_attn: VGG-19 conv1_1..relu3_3, two stride-2 deconvs, 1-channel conv, sigmoid.

    With ``pretrained=True`` the VGG part is warm-started from ImageNet and its
    parameter paths are listed in ``pretrained_keys``; they stay trainable.
    """

    network_id = "GATTN"

    def __init__(self, vgg_width=64, pretrained=True, weights_dir=None):
        super().__init__()
        self.encoder = VGG19Features("relu3_3", width=vgg_width, pretrained=pretrained,
                                     weights_dir=weights_dir)
        c = self.encoder.out_channels
        self.decoder = nn.Sequential(*_deconv_bn_relu(c, c // 2), *_deconv_bn_relu(c // 2, c // 4))
        self.head = nn.Conv2d(c // 4, 1, 3, padding=1)
        init_weights(self.decoder)
        init_weights(self.head)
        self.pretrained_keys = frozenset(self.encoder.param_keys("encoder.")) if pretrained else frozenset()

    def logits(self, x):
        check_image_batch(x)
        return self.head(self.decoder(self.encoder(x)))

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


class Discriminator(nn.Module):
    """Five 4x4 convs, strides (2, 2, 2, 1, 1); returns raw patch logits."""

    network_id = "DISC"

    def __init__(self, ndf=64):
        super().__init__()
        chans = [3, ndf, 2 * ndf, 4 * ndf, 8 * ndf]
        strides = [2, 2, 2, 1]
        layers = []
        for i, s in enumerate(strides):
            layers.append(nn.Conv2d(chans[i], chans[i + 1], 4, stride=s, padding=1))
            if i > 0:
                layers.append(nn.BatchNorm2d(chans[i + 1]))
            layers.append(nn.LeakyReLU(0.2))
        layers.append(nn.Conv2d(chans[-1], 1, 4, stride=1, padding=1))
        self.model = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, img):
        if img.dim() != 4 or img.shape[1] != 3:
            raise InputError(f"discriminator input must be (N, 3, H, W), got {tuple(img.shape)}")
        return self.model(img)


def composite(x, g0_out, attn):
    """attn * g0_out + (1 - attn) * x, attention broadcast over channels."""
    if x.shape != g0_out.shape:
        raise InputError(f"x {tuple(x.shape)} and g0_out {tuple(g0_out.shape)} differ")
    if attn.dim() != 4 or attn.shape[1] != 1 or attn.shape[0] != x.shape[0] or attn.shape[2:] != x.shape[2:]:
        raise InputError(f"attention {tuple(attn.shape)} does not match images {tuple(x.shape)}")
    return attn * g0_out + (1 - attn) * x


def conv_out(size, kernel, stride, padding, dilation=1):
    """Spatial output size of a convolution."""
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1
