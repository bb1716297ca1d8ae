#!/usr/bin/env python3
"""Stand-in mask decoder speaking the bridge protocol.

    fake_bridge.py decode-masks --prompts P --image I --out O

Writes a TSR1 f32 tensor [N, H, W] with each prompt box filled (pixel
centers inside the box), so its output differs from the ellipse stub.
"""
import argparse
import json
import struct
import sys


def png_size(path):
    with open(path, "rb") as f:
        head = f.read(24)
    if head[:8] != b"\x89PNG\r\n\x1a\n":
        sys.exit("not a PNG: " + path)
    w, h = struct.unpack(">II", head[16:24])
    return h, w


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("command", choices=["decode-masks"])
    ap.add_argument("--prompts", required=True)
    ap.add_argument("--image", required=True)
    ap.add_argument("--out", required=True)
    a = ap.parse_args()
    with open(a.prompts) as f:
        boxes = json.load(f)["boxes"]
    h, w = png_size(a.image)
    payload = bytearray()
    for b in boxes:
        for r in range(h):
            for c in range(w):
                inside = b["x1"] <= c + 0.5 < b["x2"] and b["y1"] <= r + 0.5 < b["y2"]
                payload += struct.pack("<f", 1.0 if inside else 0.0)
    with open(a.out, "wb") as f:
        f.write(b"TSR1" + bytes([0, 3]) + struct.pack("<QQQ", len(boxes), h, w) + payload)


if __name__ == "__main__":
    main()
