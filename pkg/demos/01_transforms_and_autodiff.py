"""Tour of the numeric substrate: scaled softmax, the logit/expit pair,
and the reverse-mode gradient checker.

Run: python3 demos/01_transforms_and_autodiff.py
"""

import numpy as np

from xrac import numerics as nm
from xrac.numerics import expit_transform, grad_check, logit_transform, softmax_scaled

print("== scaled softmax ==")
scores = [2.0, 0.5, -1.0]
for d in (1, 16, 64):
    print(f"softmax(scores/sqrt({d:2d})) ->", np.round(softmax_scaled(scores, d), 4))
print("larger d flattens the distribution; rows always sum to 1\n")

print("== logit / expit as an exact inverse pair ==")
rng = np.random.default_rng(0)
ps = rng.uniform(1e-6, 1 - 1e-6, size=5)
for temperature in (0.5, 1.0, 2.0):
    qs = logit_transform(ps, temperature)
    back = expit_transform(qs, temperature)
    print(f"T={temperature}: max roundtrip error {np.abs(back - ps).max():.2e}")
print()

print("== reverse-mode gradients vs central differences ==")


def tiny_attention_loss(params):
    # one attention read followed by a sigmoid score, like the teacher in miniature
    e = params["code_vec"]
    u = params["tokens"]
    attn = nm.softmax_scaled(e @ nm.transpose(u), 4)
    context = attn @ u
    score = (context * e).sum() / 2.0
    prob = nm.clamp(nm.sigmoid(score), 1e-6, 1 - 1e-6)
    return -nm.log(prob)


params = {
    "code_vec": rng.normal(size=(1, 4)),
    "tokens": rng.normal(size=(6, 4)),
}
err = grad_check(tiny_attention_loss, params, step=1e-5)
print(f"max relative error between analytic and finite-difference: {err:.2e}")
print("anything below 1e-4 means the backward rules are trustworthy")
