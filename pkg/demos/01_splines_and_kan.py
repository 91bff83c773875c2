"""B-spline bases and a single KAN layer.

Run: python3 demos/01_splines_and_kan.py
"""

import numpy as np

from kanseg.splinekan import (
    KanLinearParams,
    SplineGrid,
    activation_curve,
    activation_variance_report,
    bspline_bases,
    kan_linear_forward,
)

grid = SplineGrid(grid_min=-2.0, grid_max=2.0, intervals=5, order=3)
print("knots:", np.round(grid.knots, 2))
print("basis functions per edge:", grid.num_basis)

# every point inside the grid is covered by at most order+1 non-zero bases, summing to 1
xs = np.linspace(-2, 2, 9)
B = bspline_bases(xs, grid)
for x, row in zip(xs, B):
    print(f"x={x:+.2f}  nonzero={np.count_nonzero(row)}  sum={row.sum():.12f}")

# a 3 -> 2 layer; each of its 6 edges is w_b * silu(x) + sum_g c_g B_g(x)
params = KanLinearParams.init(3, 2, grid, rng=0)
x = np.array([[0.5, -1.0, 1.5]])
print("layer output:", kan_linear_forward(x, params).data)

probe = np.linspace(-2, 2, 5)
print("edge (0, 1) on", probe, "->", np.round(activation_curve(params, 0, 1, probe), 4))

# silence one input: its two edges become flat, so their variance is 0
params.base_weights[:, 2] = 0.0
params.spline_coeffs[:, 2] = 0.0
print("fraction of edges with variance below 1e-3:", activation_variance_report(params, thresholds=(1e-3,))[0])
