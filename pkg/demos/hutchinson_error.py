"""How accurate is a Hutchinson estimate of a Hessian diagonal?

With Rademacher probes v, ``v * (H v)`` has expectation ``diag(H)`` and,
per coordinate i, variance ``sum_{j != i} H_ij^2``.  The error of an
m-sample mean therefore shrinks like ``sqrt(sum_{j != i} H_ij^2 / m)``,
independent of how large ``H_ii`` itself is.  On a separable objective the
off-diagonal sum is zero and one sample is exact; on a small random
network it is usually comparable to (or larger than) the diagonal, so a
fixed relative tolerance is out of reach even at m = 1000.

    python demos/hutchinson_error.py
"""
import numpy as np

from gosh import autodiff as ad
from gosh.nn import FcnModel
from gosh.optim import exact_hessian_diag, hutchinson_diag

rng = np.random.default_rng(0)

# separable objective: diagonal Hessian, a single probe recovers it
a = rng.normal(size=6)
x = rng.normal(size=6)
fn = lambda t: (ad.tanh(t) * a).sum()
print("separable, m=1, max abs error:",
      np.max(np.abs(hutchinson_diag(fn, x, 1, rng) - exact_hessian_diag(fn, x))))

# 20 decision variables through a random network
net = FcnModel(20, hidden=(12, 6), seed=3)
fn = lambda t: net.forward(ad.reshape(t, (1, -1))).sum()
x = rng.uniform(0.0, 1.0, 20)
H = np.array([ad.hvp(fn, x, e) for e in np.eye(20)])
d = np.diag(H)
off = np.sqrt((H ** 2).sum(axis=1) - d ** 2)

print("\n   m   median rel. error   coords within 5%   mean |error| / predicted sd")
for m in (10, 100, 1000, 10000):
    est = hutchinson_diag(fn, x, m, np.random.default_rng(m))
    rel = np.abs(est - d) / np.abs(d)
    z = np.abs(est - d) / (off / np.sqrt(m))
    print(f"{m:5d}   {np.median(rel):17.3f}   {np.sum(rel <= 0.05):12d}/20   {z.mean():16.2f}")

# the last column stays near sqrt(2/pi) ~ 0.8: the estimator is doing
# exactly what its variance says, the relative error is set by H itself
print("\nratio off-diagonal norm / |diagonal| per coordinate:")
print(np.round(off / np.abs(d), 1))
