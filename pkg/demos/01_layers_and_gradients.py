"""
Layers by hand, checked by finite differences
==============================================

Every network layer is a pair of plain numpy functions: a forward pass and
a backward pass that maps the output gradient to input and parameter
gradients. Here we push one small tensor through each and compare the
analytic gradient against central differences.
"""
import numpy as np

from aaaseg import gradcheck
from aaaseg import ndtensor as nd

rng = np.random.default_rng(0)

# a 3x3 convolution with one in and one out channel, "same" padding
x = rng.normal(size=(1, 1, 6, 6))
p = nd.ConvParams(rng.normal(size=(1, 1, 3, 3)), np.zeros(1), stride=1, pad=1)
y = nd.conv2d_forward(x, p)
print("conv output shape", y.shape)

# the backward pass, for the objective sum(y)
g = nd.conv2d_backward(x, p, np.ones_like(y))
numeric = gradcheck.numeric_grad(lambda: float(nd.conv2d_forward(x, p).sum()), p.weights)
print("weight grad, analytic vs numeric:")
print(np.round(g.param_grads["weights"].ravel(), 5))
print(np.round(numeric, 5))

# pooling remembers where each max came from
pooled, where = nd.maxpool2_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
print("pooled", pooled.ravel(), "argmax slot", where.ravel())

# softmax + summed cross-entropy; the logit gradient is simply P - G
logits = rng.normal(size=(1, 2, 2, 2))
labels = nd.one_hot(np.array([[[0, 1], [1, 1]]]), dtype=np.float64)
loss, dlogits = nd.cross_entropy_loss(nd.softmax_channels(logits), labels)
print("loss", round(loss, 4))

# the full harness: every primitive plus a tiny whole network
for r in gradcheck.run_all(seed=0):
    print(r.line())
