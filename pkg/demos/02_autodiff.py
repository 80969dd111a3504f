"""The reverse-mode engine underneath training: tensors, backward, Adam.

Fits a tiny two-layer network to a smooth target function, then verifies
the gradients of a fresh graph against central finite differences.

Run: python3 demos/02_autodiff.py
"""

import numpy as np

from featreg import Tensor, adam_step, backward, grad_check
from featreg import autodiff as ad

rng = np.random.default_rng(1)

# data: y = sin(2x) on [-2, 2], 64 samples
x_np = np.linspace(-2, 2, 64).reshape(-1, 1)
y_np = np.sin(2 * x_np)

params = {
    "w1": Tensor(rng.normal(scale=0.8, size=(1, 16)), requires_grad=True, name="w1"),
    "b1": Tensor(np.zeros(16), requires_grad=True, name="b1"),
    "w2": Tensor(rng.normal(scale=0.3, size=(16, 1)), requires_grad=True, name="w2"),
    "b2": Tensor(np.zeros(1), requires_grad=True, name="b2"),
}


def forward() -> Tensor:
    x = Tensor(x_np)
    h = ad.shifted_softplus(ad.linear(x, params["w1"], params["b1"]))
    pred = ad.linear(h, params["w2"], params["b2"])
    err = ad.sub(pred, Tensor(y_np))
    return ad.scale(ad.vsum(ad.mul(err, err)), 1.0 / len(x_np))


state = ad.AdamState(lr=3e-2)
for step in range(401):
    ad.zero_grads(params)
    loss = forward()
    backward(loss, params=params)
    grads = {k: p.grad for k, p in params.items()}
    adam_step(params, grads, state)
    if step % 100 == 0:
        print(f"step {step:3d}: mse {float(loss.data):.5f}")

# the same machinery that guards the full training graph, on this small one;
# gradients near the fitted optimum are tiny, so the relative tolerance is
# the usual 1e-4 rather than something tighter
report = grad_check(forward, params, h=1e-4, tolerance=1e-4)
print(f"finite-difference check over {len(report.per_param)} parameter blocks: "
      f"max rel err {report.max_rel_err:.2e} -> {'OK' if report.ok else 'FAIL'}")
