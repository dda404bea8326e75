"""Slow, loop-based reference implementations used as test oracles."""
import numpy as np


def direct_unit(unit, x):
    """Scalar-loop evaluation of the two-stage unit, zero outside [0, T)."""
    n_f, f_dim = unit.feature_weights.shape
    k_len = unit.time_weights.shape[1]
    t_len = x.shape[1]
    out = np.zeros((n_f, t_len))
    for n in range(n_f):
        for t in range(t_len):
            acc = 0.0
            for k in range(k_len):
                s = t - k_len + 1 + k + unit.lookahead
                if 0 <= s < t_len:
                    pre = sum(unit.feature_weights[n, f] * x[f, s] for f in range(f_dim)) + unit.feature_bias[n]
                    acc += unit.time_weights[n, k] * float(unit.g1(np.array(pre)))
            out[n, t] = float(unit.g2(np.array(acc + unit.time_bias[n])))
    return out


def direct_logits(model, x):
    """Whole network by scalar loops: blocks, inference batch norm, head."""
    h = np.asarray(x, dtype=np.float64)
    for blk in model.blocks:
        a = direct_unit(blk.as_unit(), h)
        bn = blk.bn
        h = np.array([[bn.gamma[n] * (a[n, t] - bn.running_mean[n]) / np.sqrt(bn.running_var[n] + bn.eps)
                       + bn.beta_shift[n] for t in range(a.shape[1])] for n in range(a.shape[0])])
    w, b = model.head.weights, model.head.bias
    return np.array([[sum(w[c, n] * h[n, t] for n in range(h.shape[0])) + b[c]
                      for t in range(h.shape[1])] for c in range(w.shape[0])])
