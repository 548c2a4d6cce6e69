#!/usr/bin/env python3
"""Per-layer output shapes and parameter counts of the VGG19 presets.
Pass --forward to also time one real 224x224 forward pass (about 0.6 GB)."""
import argparse
import time

import numpy as np

from damagemap import network as N


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="vgg19-binary", choices=N.PRESETS)
    ap.add_argument("--forward", action="store_true")
    args = ap.parse_args()

    cfg = N.preset_config(args.preset)
    params = N.param_shapes(cfg)
    total = 0
    for layer, shape in zip(cfg.layers, N.layer_shapes(cfg)):
        n = sum(int(np.prod(s)) for s in params.get(layer.name, {}).values())
        total += n
        print(f"{layer.name:10s} {layer.kind:8s} {str(shape):18s} {n:>12,}")
    print(f"total parameters {total:,}; feature layer {cfg.feature_layer()}")

    if args.forward:
        net = N.build_network(cfg)
        x = np.random.default_rng(0).normal(size=(1,) + cfg.input_shape).astype(np.float32)
        start = time.perf_counter()
        _, trace = N.forward(net, x, capture=[cfg.feature_layer()])
        print(f"capture {trace.activations[cfg.feature_layer()].shape} in {time.perf_counter() - start:.2f}s")


if __name__ == "__main__":
    main()
