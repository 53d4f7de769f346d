"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from mdg import kernels


def cases(rng):
    init = rng.normal(size=(128, 4))
    u = rng.normal(size=(128, 20, 2))
    st = kernels.backends()["python"].rollout_forward(init, u, 0.1, 2)
    g = rng.normal(size=st.shape)
    boxes = np.concatenate([rng.uniform(-20, 20, (40, 16, 2)), rng.uniform(-3, 3, (40, 16, 1)),
                            rng.uniform(1, 5, (40, 16, 2))], axis=-1)
    return {
        "rollout_forward 128x20": lambda k: k.rollout_forward(init, u, 0.1, 2),
        "rollout_backward 128x20": lambda k: k.rollout_backward(st, g, 0.1, 2),
        "obb_overlap 40 frames x 16": lambda k: k.obb_overlap_frames(boxes),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    impls = kernels.backends()
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<28}" + "".join(f"{name + ' ms':>14}" for name in impls) + f"{'speedup':>10}")
    for label, fn in cases(np.random.default_rng(0)).items():
        ms = {}
        for name, impl in impls.items():
            best = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
            ms[name] = best * 1e3
        speed = f"{ms['python'] / ms['cython']:.1f}x" if "cython" in ms else "-"
        print(f"{label:<28}" + "".join(f"{v:>14.3f}" for v in ms.values()) + f"{speed:>10}")


if __name__ == "__main__":
    main()
