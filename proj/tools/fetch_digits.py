#!/usr/bin/env python3
"""Export the bundled scikit-learn handwritten digits to IDX files.

Writes digits-images-idx3-ubyte / digits-labels-idx1-ubyte (big-endian IDX,
the same layout as the classic MNIST files) with the 8x8 source images
bilinearly upsampled to 16x16 and scaled to 0..255 bytes. Use real MNIST IDX
files instead by pointing the dataset config at them; the format is identical.
"""

import os
import struct
import sys

import numpy as np
from sklearn.datasets import load_digits


def upsample_bilinear(img, out_hw):
    in_h, in_w = img.shape
    out = np.zeros((out_hw, out_hw))
    for r in range(out_hw):
        for c in range(out_hw):
            sy = (r + 0.5) * in_h / out_hw - 0.5
            sx = (c + 0.5) * in_w / out_hw - 0.5
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            wy, wx = sy - y0, sx - x0
            acc = 0.0
            for dy, vy in ((0, 1 - wy), (1, wy)):
                for dx, vx in ((0, 1 - wx), (1, wx)):
                    yy, xx = min(max(y0 + dy, 0), in_h - 1), min(max(x0 + dx, 0), in_w - 1)
                    acc += vy * vx * img[yy, xx]
            out[r, c] = acc
    return out


def main():
    out_dir = sys.argv[1] if len(sys.argv) > 1 else "data"
    hw = int(sys.argv[2]) if len(sys.argv) > 2 else 16
    os.makedirs(out_dir, exist_ok=True)

    ds = load_digits()
    n = ds.images.shape[0]
    images = np.zeros((n, hw, hw), dtype=np.uint8)
    for i in range(n):
        up = upsample_bilinear(ds.images[i] / 16.0, hw)
        images[i] = np.clip(np.round(up * 255.0), 0, 255).astype(np.uint8)
    labels = ds.target.astype(np.uint8)

    img_path = os.path.join(out_dir, "digits-images-idx3-ubyte")
    with open(img_path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, hw, hw))
        f.write(images.tobytes())
    lbl_path = os.path.join(out_dir, "digits-labels-idx1-ubyte")
    with open(lbl_path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.tobytes())
    print(f"wrote {img_path} and {lbl_path}: {n} images at {hw}x{hw}")


if __name__ == "__main__":
    main()
