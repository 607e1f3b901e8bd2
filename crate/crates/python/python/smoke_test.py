"""Smoke test for the sinewich_py extension module.

Build first, e.g. `maturin develop --release` from crates/python, or copy
target/release/libsinewich_py.so next to this file as sinewich_py.so.
"""

import json
import math
import sys

import sinewich_py as sw


def main():
    # fused kernel equals the three-stage pipeline
    a = sw.Tensor.randn([4, 2], seed=1)
    b = sw.Tensor.randn([3, 2], seed=2)
    w = sw.Tensor.randn([2, 2, 3, 3], seed=3)
    x = sw.Tensor.randn([4, 6, 6], seed=4)
    fused = sw.fuse_awb(a, b, w)
    assert fused.shape == [3, 4, 3, 3]
    y1 = sw.conv2d(x, fused).data
    y2 = sw.pipeline_apply(a, b, w, x).data
    assert max(abs(p - q) for p, q in zip(y1, y2)) < 1e-10

    # linear scaling keeps the base direction, the sine map does not
    lin = sw.vec_correlation(sw.linear_scale(fused, 2.0), sw.linear_scale(fused, -7.0))
    assert abs(abs(lin) - 1.0) < 1e-12
    sine = sw.vec_correlation(sw.sine_modulate(fused, 2.0), sw.sine_modulate(fused, 7.0))
    assert abs(sine) < 0.999

    oracle = sw.gaussian_corr_oracle(2.0, 5.0, 1.0)
    mean, stderr = sw.monte_carlo_corr(2.0, 5.0, 1.0, 200_000, seed=0)
    assert abs(oracle - 0.0111) < 1e-4
    assert abs(mean - oracle) < 4 * stderr

    omega = sw.clock_omega(sw.Tensor.randn([1, 8], seed=5, sigma=0.02), 1.0, 1.0, sw.Tensor.randn([8], seed=6))
    assert abs(omega - 1.0) < 1.0

    assert sw.format_delta_m(
        sw.delta_m([71.25, 61.38, 66.24, 16.14], [67.21, 61.93, 62.35, 17.97], [False, False, False, True])
    ) == "+5.39"

    model = sw.Model(seed=0)
    imgs = [sw.Tensor.randn([3, 32, 32], seed=s) for s in range(2)]
    preds = model.forward(imgs, 1)
    assert len(preds) == 2 and preds[0].shape == [3, 32, 32]
    assert all(math.isfinite(v) for v in preds[0].data)
    assert len(model.omegas(0)) == 5

    summary = json.loads(sw.verify(["prop2", "lowpass"]))
    assert summary["passed"], summary

    report = json.loads(sw.train(json.dumps({"epochs": 1, "train_size": 8, "val_size": 4, "baselines": False})))
    assert len(report["epochs"]) == 2

    print("sinewich_py smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
