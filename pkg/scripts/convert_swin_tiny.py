#!/usr/bin/env python3
"""One-time conversion of the published tiny window-transformer checkpoint
(.pth) into the framework-neutral manifest + blob archive this package loads.

Usage:
    python scripts/convert_swin_tiny.py swin_tiny_patch4_window7_224.pth \
        weights/swin_tiny.manifest

Float parameter tensors are written in checkpoint order; integer index
buffers (relative position indices, attention masks) are derived values and
are skipped.
"""

from __future__ import annotations

import argparse
import sys

import torch

from histoseg.pretrained import write_archive

SKIP_SUBSTRINGS = ("relative_position_index", "attn_mask")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("checkpoint", help="published .pth checkpoint")
    parser.add_argument("manifest", help="output manifest path (.bin written beside)")
    args = parser.parse_args()

    payload = torch.load(args.checkpoint, map_location="cpu", weights_only=True)
    state = payload.get("model", payload)

    arrays = []
    for name, tensor in state.items():
        if any(s in name for s in SKIP_SUBSTRINGS):
            continue
        if not torch.is_floating_point(tensor):
            continue
        arrays.append((name, tensor.numpy()))
    manifest = write_archive(arrays, args.manifest)
    print(f"wrote {len(manifest.entries)} tensors "
          f"({manifest.total_bytes} bytes) to {manifest.blob_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
