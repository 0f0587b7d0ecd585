import time

import numpy as np

from vpsplat.core_math import Camera, logit
from vpsplat.mip import MipPyramid
from vpsplat.rasterizer import render, render_backward
from vpsplat.scene import SplatScene


def make_scene(m, rng):
    pos = rng.normal(0, 0.35, (m, 3))
    pos[:, 2] += 3.0
    q = rng.normal(0, 1, (m, 4))
    return SplatScene(
        positions=pos,
        log_scales=rng.uniform(np.log(0.10), np.log(0.45), (m, 3)),
        rotations=q,
        opacity_logits=rng.uniform(-1.0, 1.5, m),
        color_sh=rng.normal(0, 0.3, (m, 16, 3)),
        intensity_sh=rng.normal(0, 0.25, (m, 16, 1)),
        uv_sh=np.concatenate([rng.uniform(0.25, 0.75, (m, 1, 2)),
                              rng.normal(0, 0.08, (m, 15, 2))], axis=1),
        mip_delta_raw=rng.normal(0, 1.0, m),
    )


def main():
    rng = np.random.default_rng(7)
    m = 5
    scene = make_scene(m, rng)
    cam = Camera(rotation=np.eye(3), translation=np.zeros(3), fx=20.0, fy=20.0,
                 cx=7.5, cy=7.5, width=16, height=16)
    tex = rng.uniform(0, 1, (32, 32, 3))
    pyr = MipPyramid.build(tex, 5)

    wc = rng.normal(0, 1, (16, 16, 3))
    wa = rng.normal(0, 1, (16, 16))

    def loss(s):
        out = render(s, cam, pyr)
        return float(np.sum(out.color * wc) + np.sum(out.alpha * wa))

    t0 = time.time()
    loss(scene)  # jit warmup
    print("first render (jit):", time.time() - t0)

    grads, aux = render_backward(scene, cam, pyr, wc, wa)
    g = grads.as_dict()

    h = 1e-4
    results = {}
    total = 0
    bad = 0
    t0 = time.time()
    for name, arr in scene.param_arrays().items():
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss(scene)
            flat[i] = orig - h
            lm = loss(scene)
            flat[i] = orig
            nflat[i] = (lp - lm) / (2 * h)
        ana = g[name].reshape(-1)
        denom = np.maximum(np.abs(nflat.reshape(-1)), np.maximum(np.abs(ana), 1e-6))
        rel = np.abs(ana - nflat.reshape(-1)) / denom
        n_bad = int((rel > 1e-3).sum())
        results[name] = (rel.max(), n_bad, flat.size)
        total += flat.size
        bad += n_bad
    print("fd time:", time.time() - t0)
    for k, v in results.items():
        print(f"{k:16s} max_rel={v[0]:.3e} bad={v[1]}/{v[2]}")
    print(f"TOTAL bad {bad}/{total} = {100*bad/total:.2f}%")


if __name__ == "__main__":
    main()
