#!/usr/bin/env python3
"""Reference VGG-16 activations for the Rust feature extractor.

Regenerates the synthetic weights from their counter hash with numpy, runs a
float64 PyTorch forward pass, and writes SGSW fixture files plus a manifest of
weight checksums. Usage: python3 tools/vgg_fixtures.py [out_dir]
"""

import hashlib
import json
import struct
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

VGG16 = [
    ("conv1_1", 3, 64), ("conv1_2", 64, 64),
    ("conv2_1", 64, 128), ("conv2_2", 128, 128),
    ("conv3_1", 128, 256), ("conv3_2", 256, 256), ("conv3_3", 256, 256),
    ("conv4_1", 256, 512), ("conv4_2", 512, 512), ("conv4_3", 512, 512),
    ("conv5_1", 512, 512), ("conv5_2", 512, 512), ("conv5_3", 512, 512),
]
POOL_AFTER = {"conv1_2", "conv2_2", "conv3_3", "conv4_3"}
MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)
SEED = 0
M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def splitmix64(z):
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def hash_uniform(seed, stream, n):
    with np.errstate(over="ignore"):
        base = np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15)
        key = base ^ (np.uint64(stream) << np.uint64(40)) ^ np.arange(n, dtype=np.uint64)
        bits = splitmix64(key) >> np.uint64(40)
    return bits.astype(np.float32) / np.float32(16777216.0)


def synthetic_weights(seed):
    out = {}
    for i, (name, cin, cout) in enumerate(VGG16):
        bound = np.float32(np.sqrt(6.0 / (cin * 9)))
        w = (np.float32(2.0) * hash_uniform(seed, 2 * i, cout * cin * 9) - np.float32(1.0)) * bound
        b = (np.float32(2.0) * hash_uniform(seed, 2 * i + 1, cout) - np.float32(1.0)) * np.float32(0.05)
        out[f"{name}.weight"] = w.reshape(cout, cin, 3, 3)
        out[f"{name}.bias"] = b
    return out


def forward(image, weights, layers):
    x = torch.from_numpy(image.astype(np.float64))[None]
    mean = torch.tensor(MEAN, dtype=torch.float64).view(1, 3, 1, 1)
    std = torch.tensor(STD, dtype=torch.float64).view(1, 3, 1, 1)
    x = (x - mean) / std
    deepest = max(i for i, (n, _, _) in enumerate(VGG16) if n in layers)
    acts = {}
    for i, (name, _, _) in enumerate(VGG16[: deepest + 1]):
        w = torch.from_numpy(weights[f"{name}.weight"].astype(np.float64))
        b = torch.from_numpy(weights[f"{name}.bias"].astype(np.float64))
        x = F.relu(F.conv2d(x, w, b, padding=1))
        if name in layers:
            acts[name] = x[0].numpy().astype(np.float32)
        if name in POOL_AFTER and i < deepest:
            x = F.max_pool2d(x, 2)
    return acts


def write_sgsw(path, tensors):
    with open(path, "wb") as f:
        f.write(b"SGSW")
        f.write(struct.pack("<II", 1, len(tensors)))
        for name, arr in tensors:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def test_images():
    yy, xx = np.meshgrid(np.linspace(0, 1, 32), np.linspace(0, 1, 32), indexing="ij")
    ramp = np.stack([xx, yy, 0.5 + 0.5 * np.sin(6 * xx + 4 * yy)]).astype(np.float32)
    rng = np.random.default_rng(1234)
    noise = rng.random((3, 32, 32), dtype=np.float32)
    noise64 = rng.random((3, 64, 64), dtype=np.float32)
    deep = ["conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3", "conv4_3", "conv5_3"]
    return [
        ("zero", np.zeros((3, 32, 32), np.float32), deep),
        ("ramp", ramp, deep),
        ("noise", noise, deep),
        ("noise64", noise64, ["conv2_2", "conv3_3"]),
    ]


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures/vgg")
    out.mkdir(parents=True, exist_ok=True)
    weights = synthetic_weights(SEED)
    manifest = {
        "seed": SEED,
        "weights": {
            k: hashlib.sha256(np.ascontiguousarray(v, dtype="<f4").tobytes()).hexdigest()
            for k, v in weights.items()
        },
        "fixtures": [],
    }
    for name, image, layers in test_images():
        acts = forward(image, weights, set(layers))
        tensors = [("image", image)] + [(l, acts[l]) for l in layers]
        write_sgsw(out / f"{name}.sgsw", tensors)
        manifest["fixtures"].append({"file": f"{name}.sgsw", "layers": layers})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


if __name__ == "__main__":
    main()
