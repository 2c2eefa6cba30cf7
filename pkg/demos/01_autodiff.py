"""Reverse-mode differentiation on numpy arrays, checked against finite differences."""
import numpy as np

from mtlab import autodiff as ad

x = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
loss = ad.tsum(ad.mul(x, x))
ad.backward(loss)
print("d/dx sum(x^2) at [1, 2, 3]:", x.grad)

# a small attention block, differentiated end to end
rng = np.random.default_rng(0)
q, k, v = (ad.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True) for _ in range(3))
out = ad.attention(q, k, v, None, 2)
ad.backward(ad.tsum(ad.mul(out, out)))

# compare one entry of dL/dq with a central difference
step = 1e-5
with ad.no_grad():
    def value(qdata):
        o = ad.attention(ad.Tensor(qdata), ad.Tensor(k.data), ad.Tensor(v.data), None, 2).data
        return float((o * o).sum())
    bumped = q.data.copy()
    bumped[0, 1, 2] += step
    lowered = q.data.copy()
    lowered[0, 1, 2] -= step
    numeric = (value(bumped) - value(lowered)) / (2 * step)
print(f"attention dL/dq[0,1,2]: analytic {q.grad[0, 1, 2]:.10f}, numeric {numeric:.10f}")

# non-finite values are reported with the operation that produced them
try:
    ad.div(ad.Tensor(np.array([1.0])), ad.Tensor(np.array([0.0])))
except ad.NonFiniteError as exc:
    print("caught:", exc)
