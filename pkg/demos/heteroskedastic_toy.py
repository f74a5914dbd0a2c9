"""Fit the heteroskedastic emulator to a 1-d toy and compare the noise it learns.

    python3 demos/heteroskedastic_toy.py
"""
import numpy as np

from histmatch.emulator import ReplicateData, fit

rng = np.random.default_rng(1)
x = np.repeat(np.linspace(0.0, 5.0, 15), 10)
sd = 0.05 + 0.05 * x
y = x * np.sin(2 * x) + rng.normal(0.0, sd)

model = fit(ReplicateData.from_runs((x / 5)[:, None], y))
xt = np.linspace(0.0, 5.0, 11)
mean, var_mean, var_noise = model.predict((xt / 5)[:, None])

print(f"{'x':>5} {'truth':>8} {'mean':>8} {'true sd':>8} {'fit sd':>8}")
for xi, m, vn in zip(xt, mean, var_noise):
    print(f"{xi:5.1f} {xi * np.sin(2 * xi):8.3f} {m:8.3f} {0.05 + 0.05 * xi:8.3f} {np.sqrt(vn):8.3f}")
