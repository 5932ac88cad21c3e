"""
A small reverse-mode autograd on numpy
======================================

Every operation the networks need has a hand-written backward pass. The
finite-difference checker compares those against central differences, and the
dilated temporal convolution matches a filter inflated with zeros exactly.

Run with ``python demos/02_autograd.py``.
"""
import numpy as np

from streamevo import tensor as tn

rng = np.random.default_rng(0)

# %% Build a tiny expression and backpropagate through it.
x = tn.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
w = tn.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
loss = tn.total(tn.relu(tn.linear(x, w)))
loss.backward()
print("loss", float(loss.data), "\ndL/dw\n", w.grad)

# %% Dilated temporal convolution. Clips are (batch, time, height, width, channels);
# a 3-tap kernel at dilation r reaches r frames back and r frames forward.
clip = rng.standard_normal((1, 12, 2, 2, 3))
kernel = rng.standard_normal((3, 3, 3))
for r in (1, 2, 4, 8):
    dilated = tn.temporal_conv1d_dilated(tn.Tensor(clip), tn.Tensor(kernel), r).data
    inflated = tn.temporal_conv1d(tn.Tensor(clip), tn.Tensor(tn.inflate_filter(kernel, r))).data
    print(f"r={r}: inflated filter has {tn.inflate_filter(kernel, r).shape[0]} taps, "
          f"bitwise equal: {np.array_equal(dilated, inflated)}")

# %% Gradient checks in float64.
with tn.default_dtype(np.float64):
    logits = tn.Tensor(rng.standard_normal((5, 12)), requires_grad=True)
    labels = rng.integers(0, 12, 5)
    err = tn.grad_check(lambda z: tn.softmax_cross_entropy(z, labels, label_smoothing=0.2), [logits])
    print(f"softmax cross-entropy, max relative error {err:.2e}")

    feats = [tn.Tensor(rng.standard_normal((2, 3)), requires_grad=True) for _ in range(3)]
    gate_logits = [tn.Tensor(np.array(rng.standard_normal()), requires_grad=True) for _ in range(3)]
    err = tn.grad_check(lambda *a: tn.total(tn.gated_weighted_sum(list(a[:3]), list(a[3:]))), feats + gate_logits)
    print(f"sigmoid-gated sum over three inputs, max relative error {err:.2e}")

# %% Non-finite values are caught at the operation that produced them.
try:
    with np.errstate(over="ignore"):
        tn.mul(tn.Tensor(np.array([1e308])), tn.Tensor(np.array([1e308])))
except tn.NonFiniteError as exc:
    print("caught:", exc)
