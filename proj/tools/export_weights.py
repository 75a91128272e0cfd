#!/usr/bin/env python3
"""Export pretrained feature networks for semisr (needs torch and torchvision).

  export_weights.py vgg19 vgg19_features.pt
      state dict for model.perceptual.weights / fid.backbone.weights
  export_weights.py inception inception_pool3.pt
      TorchScript module for fid.torchscript (2048-d pool3 features, 299 px input)
"""

import argparse

import torch
import torchvision


class InceptionPool3(torch.nn.Module):
    def __init__(self):
        super().__init__()
        net = torchvision.models.inception_v3(weights="IMAGENET1K_V1", aux_logits=True, transform_input=False)
        net.fc = torch.nn.Identity()
        net.eval()
        self.net = net
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        # x: (N, 3, 299, 299) in [0, 1]
        return self.net((x - self.mean) / self.std)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("network", choices=["vgg19", "inception"])
    p.add_argument("out")
    a = p.parse_args()
    if a.network == "vgg19":
        vgg = torchvision.models.vgg19(weights="IMAGENET1K_V1")
        # libtorch reads plain dicts, not OrderedDict
        torch.save(dict(vgg.features.state_dict()), a.out)
    else:
        with torch.no_grad():
            torch.jit.trace(InceptionPool3().eval(), torch.rand(2, 3, 299, 299)).save(a.out)
    print(a.out)


if __name__ == "__main__":
    main()
