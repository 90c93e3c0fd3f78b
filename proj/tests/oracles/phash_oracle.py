"""Reference perceptual hash, written against numpy/scipy only.

Regenerates tests/data/phash/: grayscale PNG fixtures and expected.json with
their hashes. Image sides are multiples of 32 so the area downscale is an
exact block mean.
"""

import json
import pathlib

import cv2
import numpy as np
from scipy.fft import dctn

OUT = pathlib.Path(__file__).resolve().parent.parent / "data" / "phash"


def reference_hash(gray):
    h, w = gray.shape
    small = gray.astype(np.float64).reshape(32, h // 32, 32, w // 32).mean(axis=(1, 3))
    coeffs = dctn(small, type=2, norm="ortho")
    block = coeffs[1:9, 1:9].reshape(-1)
    median = np.median(block)
    bits = 0
    for i, c in enumerate(block):
        if c > median:
            bits |= 1 << (63 - i)
    margin = float(np.min(np.abs(block - median)))
    return bits, margin


def fixtures(rng):
    yy, xx = np.mgrid[0:192, 0:256]
    yield "rings", (127 + 120 * np.sin(np.hypot(xx - 97, yy - 61) / 9)).astype(np.uint8)
    yield "waves", (127 + 60 * np.sin(xx / 13.0 + yy / 29.0) + 50 * np.cos(yy / 7.0 - xx / 41.0)).astype(np.uint8)
    for k in range(4):
        coarse = rng.integers(0, 256, size=(6, 8)).astype(np.float32)
        img = cv2.resize(coarse, (256, 192), interpolation=cv2.INTER_CUBIC)
        yield f"blobs{k}", np.clip(img, 0, 255).astype(np.uint8)
    big = rng.integers(0, 256, size=(320, 320)).astype(np.uint8)
    yield "noise", big
    base = cv2.resize(rng.integers(0, 256, size=(4, 4)).astype(np.float32), (128, 128), interpolation=cv2.INTER_CUBIC)
    base = np.clip(base, 0, 255).astype(np.uint8)
    yield "scene", base
    yield "scene_brighter", np.clip(base.astype(int) + 12, 0, 255).astype(np.uint8)
    yield "scene_noisy", np.clip(base.astype(int) + rng.integers(-6, 7, size=base.shape), 0, 255).astype(np.uint8)
    yield "scene_flipped", base[:, ::-1].copy()


def main():
    rng = np.random.default_rng(20240521)
    OUT.mkdir(parents=True, exist_ok=True)
    expected = []
    for name, img in fixtures(rng):
        cv2.imwrite(str(OUT / f"{name}.png"), img)
        bits, margin = reference_hash(cv2.imread(str(OUT / f"{name}.png"), cv2.IMREAD_GRAYSCALE))
        assert margin > 1e-6, f"{name}: coefficient too close to the median"
        expected.append({"file": f"{name}.png", "phash": f"{bits:016x}"})
    (OUT / "expected.json").write_text(json.dumps(expected, indent=2) + "\n")


if __name__ == "__main__":
    main()
