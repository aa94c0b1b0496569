"""
Reverse-mode autodiff and finite-difference checks
===================================================

The engine wraps numpy arrays in ``Tensor`` objects that record how they
were built.  ``backward`` walks that record in reverse and accumulates
gradients, undoing numpy broadcasting on the way back.
"""

# %%
# A tiny expression: z = sum(softmax(W x) * y).
import numpy as np

from gnnm import autodiff as ad
from gnnm.gradcheck import check_gnnm, numerical_gradient, relative_error
from gnnm.module import GnnmConfig

rng = np.random.default_rng(0)
W = ad.tensor(rng.normal(size=(3, 4)), requires_grad=True)
x = ad.tensor(rng.normal(size=(4, 1)))
y = ad.tensor(rng.normal(size=(3, 1)))


def f():
    return ad.sum(ad.softmax(ad.matmul(W, x), axis=0) * y)


z = f()
ad.backward(z)
print("z =", z.item())
print("dz/dW =\n", W.grad)

# %%
# Central differences agree to roughly 1e-10 in double precision.
numeric = numerical_gradient(f, W, h=1e-5)
print("relative error vs finite differences:", relative_error(W.grad, numeric))

# %%
# The same check over every parameter of a full module.  Both attention
# variants, with and without temporal aggregation.
for variant in ("component", "temporal"):
    for aggregate in (False, True):
        report = check_gnnm(GnnmConfig(d=8, n=6, attention_variant=variant, aggregate_output=aggregate), seed=0)
        print(f"{variant:9s} aggregate={aggregate!s:5s} max rel err {report.max_error:.2e} "
              f"(worst tensor {report.worst}) -> {'PASS' if report.passed else 'FAIL'}")
