"""Tour of the tensor engine: reverse-mode gradients, conv layers, checks.

Run from the repository root:

    python3 demos/autodiff_tour.py
"""

import numpy as np

from gpat.tensor import Tensor, conv2d, conv_transpose2d, numeric_grad_check


def scalar_chain():
    print("== scalar chain ==")
    x = Tensor(np.array(2.0), requires_grad=True)
    y = (x * x * 3.0) + (x * 2.0)     # 3x^2 + 2x, dy/dx = 6x + 2
    y.backward()
    print(f"y = 3x^2 + 2x at x=2 -> {y.data:.1f}, dy/dx = {x.grad:.1f} (expect 14)")


def convolution_roundtrip():
    print("\n== conv / transposed-conv shapes ==")
    x = Tensor(np.random.default_rng(0).standard_normal((3, 8, 8)))
    kernel = Tensor(np.random.default_rng(1).standard_normal((6, 3, 4, 4)) * 0.1)
    down = conv2d(x, kernel, Tensor(np.zeros(6)), stride=2, padding=1)
    print(f"conv     3x8x8 -> {'x'.join(map(str, down.data.shape))}")
    back_kernel = Tensor(np.random.default_rng(2).standard_normal((6, 3, 4, 4)) * 0.1)
    up = conv_transpose2d(down, back_kernel, Tensor(np.zeros(3)),
                          stride=2, padding=1)
    print(f"convT    {'x'.join(map(str, down.data.shape))} -> "
          f"{'x'.join(map(str, up.data.shape))}  (shape restored)")


def adjoint_identity():
    """<conv(x), y> == <x, convT(y)> with the same kernel array."""
    print("\n== adjoint identity ==")
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((2, 9, 9)))
    kernel = Tensor(rng.standard_normal((4, 2, 3, 3)))
    fwd = conv2d(x, kernel, Tensor(np.zeros(4)), stride=2, padding=1)
    y = Tensor(rng.standard_normal(fwd.data.shape))
    lhs = float(np.sum(fwd.data * y.data))
    # conv output height 5: (5-1)*2 - 2 + 3 = 9, no output padding needed
    back = conv_transpose2d(y, kernel, Tensor(np.zeros(2)), stride=2, padding=1)
    rhs = float(np.sum(x.data * back.data))
    print(f"<conv(x), y> = {lhs:+.6f}")
    print(f"<x, convT(y)> = {rhs:+.6f}   (match within 1e-9: "
          f"{abs(lhs - rhs) < 1e-9})")


def gradient_check():
    print("\n== numeric gradient check ==")
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 6, 6)), requires_grad=True)
    kernel = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.3)
    bias = Tensor(np.zeros(3))

    def f(t):
        return conv2d(t, kernel, bias, stride=1, padding=1).relu().sum()

    err = numeric_grad_check(f, x, h=1e-5)
    print(f"conv -> relu -> sum, max relative error vs central differences: "
          f"{err:.2e}")


if __name__ == "__main__":
    scalar_chain()
    convolution_roundtrip()
    adjoint_identity()
    gradient_check()
