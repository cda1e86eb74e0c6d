"""Regenerates s3d_reference.json with torchvision's S3D in float64.

Weights and input are closed-form functions of (tensor name, flat index), so
the Rust test can rebuild them without shipping the checkpoint.
"""
import json
import math

import torch
import torchvision


def name_hash(key):
    return float(sum(key.encode()) % 97)


def unit(k, salt):
    """Integer hash of (k, salt) mapped to [-0.5, 0.5)."""
    return ((k * 2654435761 + salt * 40503) % 4294967296) / 4294967296 - 0.5


def value(key, shape, k):
    h = name_hash(key)
    if key.endswith("running_mean"):
        return 0.05 * math.sin(1.3 * k + h)
    if key.endswith("running_var"):
        return 1.0 + 0.5 * math.sin(0.11 * k + h) ** 2
    if len(shape) == 1 and key.endswith("weight"):
        return 1.0 + 0.1 * math.sin(0.7 * k + h)
    if len(shape) == 1 and key.endswith("bias"):
        return 0.1 * math.cos(0.3 * k + h)
    fan_in = math.prod(shape[1:])
    return unit(k, int(h)) * math.sqrt(24.0 / fan_in)


def main():
    model = torchvision.models.video.s3d().double().eval()
    sd = model.state_dict()
    for key, t in sd.items():
        if "num_batches" in key:
            continue
        flat = torch.tensor([value(key, list(t.shape), k) for k in range(t.numel())], dtype=torch.float64)
        sd[key] = flat.reshape(t.shape)
    model.load_state_dict(sd)
    b, t, h, w = 2, 16, 32, 32
    clip = torch.tensor(
        [
            [
                [
                    [
                        [0.5 + 0.5 * math.sin(0.4 * ti + 0.3 * (j + 1) * yi - 0.2 * xi + 1.1 * c) for c in range(3)]
                        for xi in range(w)
                    ]
                    for yi in range(h)
                ]
                for ti in range(t)
            ]
            for j in range(b)
        ],
        dtype=torch.float64,
    )
    mean = torch.tensor([0.43216, 0.394666, 0.37645], dtype=torch.float64)
    std = torch.tensor([0.22803, 0.22145, 0.216989], dtype=torch.float64)
    x = ((clip - mean) / std).permute(0, 4, 1, 2, 3)
    with torch.no_grad():
        feats = model.features(x).mean(dim=(2, 3, 4))
    with open("s3d_reference.json", "w") as f:
        json.dump({"clip_shape": [b, t, h, w, 3], "features": feats.tolist()}, f)


if __name__ == "__main__":
    main()
