# A short tour of the tape-based autodiff engine.
#
# Every operation that sees an input with requires_grad=True records a node
# on the active tape. backward() walks that tape once, in reverse, and fills
# in .grad on the leaves.

import numpy as np

from ftlab import tensor as T

# Two leaves and a tiny expression: loss = sum(tanh(x @ w))

rng = np.random.default_rng(0)
x = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True, name="x")
w = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True, name="w")

with T.Tape() as tape:
    loss = T.sum_all(T.tanh(T.matmul(x, w)))

T.backward(loss, tape)
print("loss", loss.item())
print("recorded nodes:", len(tape.nodes))
print("dL/dw\n", w.grad)

# The analytic gradient is easy to write down here, so compare directly.

h = x.data @ w.data
print("max diff vs hand-derived:", np.abs(w.grad - x.data.T @ (1 - np.tanh(h) ** 2)).max())

# grad_check compares reverse mode with central differences and returns the
# worst relative error, max(|a|, |b|, 1e-8) in the denominator.

err = T.grad_check(lambda a, b: T.sum_all(T.tanh(T.matmul(a, b))), [x.data, w.data])
print("grad_check worst relative error: %.2e" % err)

# A deliberately wrong backward rule is caught immediately.

def bad_square(a):
    return T.record_op(a.data ** 2, (a,), lambda g: (3.0 * g * a.data,))

print("wrong rule error: %.2f" % T.grad_check(lambda a: T.sum_all(bad_square(a)), [np.array([0.5, -1.0])]))

# Softmax subtracts the row max, so huge logits stay finite.

print(T.softmax(T.Tensor([1000.0, 1000.5])).data)
