#!/usr/bin/env python3
"""Export torchvision EfficientNet-B0 backbone weights to an effiseg weight archive.

Usage:
  export_torchvision_b0.py --out b0.weights                       # ImageNet weights (downloads via torchvision)
  export_torchvision_b0.py --out b0.weights --state-dict b0.pth   # offline, from a saved state_dict
  export_torchvision_b0.py --out fixture.weights --random-seed 0 --reference-size 64

With --random-seed the network is randomly initialised (running statistics
included) so that the archive can serve as a test fixture. --reference-size N
additionally stores a fixed (1, 3, N, N) input and the float64 torchvision
activations at the stride-8, stride-16 and every candidate stride-32 tap
(reference.input, reference.f3, reference.f4, reference.block6a ... block7a).
"""

import argparse
import json
import struct
import sys

FORMAT = b"effiseg-weights-1"
FNV_OFFSET = 1469598103934665603
FNV_PRIME = 1099511628211
MASK64 = (1 << 64) - 1
TRUNCATIONS = ["block6a", "block6b", "block6c", "block6d", "block7a"]


def fnv1a(data, h=FNV_OFFSET):
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def shape4(shape):
    dims = list(shape)
    if len(dims) > 4:
        raise ValueError(f"tensor rank {len(dims)} not supported")
    return dims + [1] * (4 - len(dims))


def write_archive(path, manifest, entries):
    """entries: list of (name, numpy array)."""
    import numpy as np

    buf = bytearray()
    buf += FORMAT + b"\n"
    m = json.dumps(manifest).encode()
    buf += struct.pack("<Q", len(m)) + m
    buf += struct.pack("<Q", len(entries))
    for name, arr in entries:
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            dtype = 8
        else:
            arr = arr.astype(np.float32)
            dtype = 4
        raw = arr.astype("<f8" if dtype == 8 else "<f4").tobytes()
        encoded = name.encode()
        buf += struct.pack("<I", len(encoded)) + encoded
        buf += struct.pack("<4q", *shape4(arr.shape))
        buf += struct.pack("<B", dtype)
        buf += struct.pack("<Q", len(raw)) + raw
    buf += struct.pack("<Q", fnv1a(buf))
    with open(path, "wb") as f:
        f.write(buf)


def randomise(model, seed):
    import torch

    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, t in model.state_dict().items():
            if not t.is_floating_point():
                continue
            if name.endswith("running_var"):
                t.copy_(torch.rand(t.shape, generator=gen) * 0.5 + 0.75)
            elif name.endswith("running_mean"):
                t.copy_((torch.rand(t.shape, generator=gen) - 0.5) * 0.2)
            elif t.dim() == 1:
                # BN affine and SE biases: stay near the identity so activations remain O(1).
                base = 1.0 if name.endswith("1.weight") else 0.0
                t.copy_(base + (torch.rand(t.shape, generator=gen) - 0.5) * 0.2)
            else:
                fan_in = t[0].numel()
                bound = (3.0 / fan_in) ** 0.5
                t.copy_((torch.rand(t.shape, generator=gen) * 2 - 1) * bound)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--state-dict", help="local torchvision efficientnet_b0 state_dict (.pth)")
    src.add_argument("--random-seed", type=int, help="random weights for test fixtures")
    ap.add_argument("--reference-size", type=int, default=0, help="store reference activations for an NxN input")
    args = ap.parse_args()

    import numpy as np
    import torch
    import torchvision

    if args.random_seed is not None:
        model = torchvision.models.efficientnet_b0(weights=None)
        randomise(model, args.random_seed)
        source = f"random:{args.random_seed}"
    elif args.state_dict:
        model = torchvision.models.efficientnet_b0(weights=None)
        model.load_state_dict(torch.load(args.state_dict, map_location="cpu"))
        source = args.state_dict
    else:
        weights = torchvision.models.EfficientNet_B0_Weights.IMAGENET1K_V1
        model = torchvision.models.efficientnet_b0(weights=weights)
        source = str(weights)
    model.eval()

    entries = []
    for name, t in model.state_dict().items():
        # Backbone stages 0..7 only; the 1x1 head (features.8) and classifier are not used.
        if not name.startswith("features.") or name.startswith("features.8.") or name.endswith("num_batches_tracked"):
            continue
        entries.append((name, t.detach().cpu().numpy().astype(np.float32)))

    manifest = {"source": source, "architecture": "efficientnet_b0", "torchvision": torchvision.__version__}

    if args.reference_size:
        n = args.reference_size
        if n % 32:
            sys.exit("--reference-size must be divisible by 32")
        gen = torch.Generator().manual_seed(1234)
        x = torch.randn(1, 3, n, n, generator=gen, dtype=torch.float64)
        feats = model.features.double()
        # Evaluate with the float32-rounded weights the archive stores.
        with torch.no_grad():
            for p in feats.state_dict().values():
                if p.is_floating_point():
                    p.copy_(p.float().double())
            refs = {}
            h = feats[0](x)
            for s in range(1, 8):
                for j, block in enumerate(feats[s]):
                    h = block(h)
                    tag = f"block{s}{chr(ord('a') + j)}"
                    if tag in TRUNCATIONS:
                        refs[tag] = h.clone()
                if s == 3:
                    refs["f3"] = h.clone()
                if s == 5:
                    refs["f4"] = h.clone()
        entries.append(("reference.input", x.numpy()))
        for key, value in refs.items():
            entries.append((f"reference.{key}", value.numpy()))
        manifest["reference_size"] = n

    write_archive(args.out, manifest, entries)
    print(f"wrote {len(entries)} tensors to {args.out}")


if __name__ == "__main__":
    main()
