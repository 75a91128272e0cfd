"""Regenerates the PyTorch-produced test fixtures in this directory.

vgg_tiny_features.pth  torchvision-style state dict for the tiny VGG backbone
vgg_tiny_probe.pth     an input batch and the reference tap output (3, 2)
fid_mean_colour.pt     TorchScript feature network: per-channel mean and std
"""
import torch
import torch.nn as nn


class MeanColour(nn.Module):
    def forward(self, x):
        return torch.cat([x.mean((2, 3)), x.std((2, 3))], 1)


def main():
    torch.manual_seed(1234)
    features = nn.Sequential(
        nn.Conv2d(3, 8, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(8, 16, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(16, 16, 3, padding=1), nn.ReLU(), nn.Conv2d(16, 16, 3, padding=1))
    torch.save({k: v.clone() for k, v in features.state_dict().items()}, "vgg_tiny_features.pth")

    x = torch.rand(2, 3, 16, 16)
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
    with torch.no_grad():
        y = features((x - mean) / std)
    torch.save({"input": x, "output": y}, "vgg_tiny_probe.pth")

    torch.jit.script(MeanColour()).save("fid_mean_colour.pt")


if __name__ == "__main__":
    main()
