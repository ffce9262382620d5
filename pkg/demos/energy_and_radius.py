"""
Energy, margin and robust radius on a toy head
==============================================

A two-class affine head makes every quantity checkable by hand: the margin
is linear in the embedding, so the first-order radius is exact and the
searched radius agrees with it.
"""

import numpy as np

from e2a.landscape import binary_energy_of_margin, energy, margin, margin_radius, oracle_radius
from e2a.properties import affine_head

# S = (3 h0 + 4 h1, 0): the boundary is the line 3 h0 + 4 h1 = 0
head = affine_head(np.array([[3.0, 0.0], [4.0, 0.0]]), np.zeros(2))
H = np.array([1.0, 1.0])
S = head(H).numpy()[0]
print("logits", S, "margin", margin(S, 0), "energy", round(energy(S), 4))

print("first-order radius", margin_radius(H, 0, head).value)
print("searched radius   ", round(oracle_radius(H, 0, head).value, 5))

# moving toward the boundary raises the energy
for t in (0.0, 0.5, 1.0, 1.3):
    h = H - t * np.array([3.0, 4.0]) / 5
    s = head(h).numpy()[0]
    print(f"distance moved {t:.1f}: margin {margin(s, 0):5.2f}  energy {energy(s):7.4f}")

# the symmetric two-logit case as a function of the margin alone
gammas = np.linspace(0, 6, 7)
print(np.round([binary_energy_of_margin(g) for g in gammas], 4))
