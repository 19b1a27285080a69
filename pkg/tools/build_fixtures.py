#!/usr/bin/env python3
"""Regenerate the committed fixture models and sample images under tests/fixtures.

All weights are hand-constructed and deterministic; rerunning this script
must reproduce the committed files byte for byte.
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from relprop import model_graph as mg
from relprop import model_io as io

FIXTURES = Path(__file__).resolve().parents[1] / "tests" / "fixtures"


def dense2() -> mg.Network:
    # positive weights keep every classical-rule denominator well away from 0
    w1 = np.array([
        [0.250, 0.500, 0.125, 0.750],
        [0.375, 0.250, 0.625, 0.125],
        [0.500, 0.125, 0.250, 0.375],
    ])
    w2 = np.array([
        [0.500, 0.250, 0.125],
        [0.125, 0.375, 0.500],
    ])
    layers = (mg.Dense(w1, np.zeros(3)), mg.Dense(w2, np.zeros(2)))
    return mg.Network(layers, (4,), 2, name="dense2")


def conv_pool() -> mg.Network:
    rng = np.random.default_rng(11)
    kernel = rng.uniform(0.1, 0.9, (2, 3, 3, 1))
    dense = rng.uniform(0.1, 0.9, (2, 8))
    layers = (
        mg.Conv2D(kernel, np.zeros(2)),
        mg.ReLU(),
        mg.MaxPool2D((2, 2), (2, 2)),
        mg.Flatten(),
        mg.Dense(dense, np.zeros(2)),
    )
    return mg.Network(layers, (6, 6, 1), 2, name="conv_pool")


def degenerate() -> mg.Network:
    # each first-layer row holds one +a/-a pair, so any constant input gives
    # an exactly zero w.x sum; the biases alone drive the forward pass
    w1 = np.zeros((4, 12))
    pairs = [(0, 3, 0.5), (1, 7, 0.25), (2, 9, 0.5), (5, 11, 0.25)]
    for row, (i, j, a) in enumerate(pairs):
        w1[row, i] = a
        w1[row, j] = -a
    b1 = np.array([0.5, 1.0, 0.75, 0.25])
    w2 = np.array([
        [0.5, 0.25, 0.125, 0.25],
        [0.25, 0.5, 0.25, 0.125],
    ])
    layers = (
        mg.Flatten(),
        mg.Dense(w1, b1),
        mg.ReLU(),
        mg.Dense(w2, np.zeros(2)),
    )
    return mg.Network(layers, (2, 2, 3), 2, name="degenerate")


def residual_small() -> mg.Network:
    rng = np.random.default_rng(23)
    k1 = rng.uniform(-0.4, 0.6, (2, 3, 3, 2))
    k2 = rng.uniform(-0.4, 0.6, (2, 3, 3, 2))
    dense = rng.uniform(-0.5, 0.8, (2, 32))
    block = mg.ResidualBlock(
        branch=(
            mg.Conv2D(k1, np.zeros(2), (1, 1), "same"),
            mg.ReLU(),
            mg.Conv2D(k2, np.zeros(2), (1, 1), "same"),
        ),
    )
    layers = (block, mg.ReLU(), mg.Flatten(), mg.Dense(dense, np.zeros(2)))
    return mg.Network(layers, (4, 4, 2), 2, name="residual_small")


def square_detector() -> mg.Network:
    """Hand-built left/right locator for bright 4x4 squares on 16x16 images.

    The conv computes each window's mean intensity; the -0.75 bias only
    lets near-white squares through. Pooled columns 0-2 vote left, 3-5
    vote right.
    """
    kernel = np.full((1, 4, 4, 3), 1.0 / 48.0)
    bias = np.array([-0.75])
    dense = np.zeros((2, 36))
    for r in range(6):
        for c in range(6):
            dense[0 if c <= 2 else 1, r * 6 + c] = 1.0
    layers = (
        mg.Conv2D(kernel, bias),
        mg.ReLU(),
        mg.MaxPool2D((2, 2), (2, 2)),
        mg.Flatten(),
        mg.Dense(dense, np.zeros(2)),
    )
    return mg.Network(layers, (16, 16, 3), 2, name="square_detector",
                      labels=("left", "right"))


def sample_square_image() -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(42)
    img = rng.uniform(0.2, 0.55, (16, 16))
    img[3:7, 9:13] = rng.uniform(0.9, 1.0, (4, 4))
    mask = np.zeros((16, 16), dtype=bool)
    mask[3:7, 9:13] = True
    return np.repeat(img[:, :, None], 3, axis=2), mask


def main() -> None:
    models = FIXTURES / "models"
    images = FIXTURES / "images"
    models.mkdir(parents=True, exist_ok=True)
    images.mkdir(parents=True, exist_ok=True)
    for build in (dense2, conv_pool, degenerate, residual_small, square_detector):
        net = build()
        io.save_model_files(net, models / f"{net.name}.json", models / f"{net.name}.bin")
        print(f"wrote {net.name}")
    gray = np.full((2, 2, 3), 128 / 255.0)
    io.save_image(gray, images / "gray_2x2.ppm")
    img, mask = sample_square_image()
    io.save_image(img, images / "square_sample.ppm")
    io.save_mask(mask, images / "square_sample_mask.pgm")
    print("wrote sample images")


if __name__ == "__main__":
    main()
