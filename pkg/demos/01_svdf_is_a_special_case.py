"""An SVDF layer is an S1DCNN unit with the biases and the first activation removed."""
import numpy as np

from s1dcnn.layers import Activation, SvdfLayer, reduce_svdf_to_unit, svdf_forward, unit_forward

rng = np.random.default_rng(0)
spacer = "_" * 60

# 4 nodes, 6 input features, memory of 5 frames
layer = SvdfLayer(rng.normal(size=(4, 6)).astype(np.float32),
                  rng.normal(size=(4, 5)).astype(np.float32), Activation.RELU)
x = rng.normal(size=(6, 12)).astype(np.float32)

print("Each SVDF node filters a 6 x 5 patch with a rank-1 filter outer(beta, alpha).")
print("dense filter rank of node 0:", np.linalg.matrix_rank(np.outer(layer.beta[0], layer.alpha[0])))

unit = reduce_svdf_to_unit(layer)
print("\nThe reduced unit reuses beta as feature weights and alpha as time weights.")
print("feature_bias =", unit.feature_bias, " time_bias =", unit.time_bias)
print("g1 =", unit.g1.name, " g2 =", unit.g2.name, " lookahead =", unit.lookahead)

a = svdf_forward(layer, x)
b = unit_forward(unit, x)
print("\nmax |svdf - unit| over a 12-frame input:", np.abs(a - b).max())
print(spacer)

print("\nGive the unit biases and the two routes part ways:")
unit.feature_bias[:] = 0.5
print("max |svdf - unit| =", np.abs(svdf_forward(layer, x) - unit_forward(unit, x)).max())
print("(the arrays are shared, so the layer's own output is unchanged)")

print("\nParameters per unit: N*(F+K+2) =", unit.num_params(),
      " versus the dense N*F*K =", 4 * 6 * 5)
