"""Parameter initializers."""
import numpy as np

from .tape import Parameter


def kaiming_uniform(rng, shape, fan_in, name):
    bound = np.sqrt(6.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape), name)


def zeros(shape, name):
    return Parameter(np.zeros(shape), name)


def dense_params(rng, n_in, n_out, prefix):
    return {"W": kaiming_uniform(rng, (n_in, n_out), n_in, f"{prefix}.W"),
            "b": zeros((n_out,), f"{prefix}.b")}


def conv_params(rng, k, c_in, c_out, prefix):
    return {"W": kaiming_uniform(rng, (k, k, c_in, c_out), k * k * c_in, f"{prefix}.W"),
            "b": zeros((c_out,), f"{prefix}.b")}


def deconv_params(rng, k, c_in, c_out, prefix):
    # stored as (k, k, c_out, c_in); each output sees roughly k*k*c_in/stride^2 inputs
    return {"W": kaiming_uniform(rng, (k, k, c_out, c_in), k * k * c_in // 4 or 1, f"{prefix}.W"),
            "b": zeros((c_out,), f"{prefix}.b")}


def lstm_params(rng, n_in, n_hidden, prefix, forget_bias=1.0):
    bound = 1.0 / np.sqrt(n_hidden)
    b = np.zeros(4 * n_hidden)
    b[n_hidden:2 * n_hidden] = forget_bias
    return {"Wx": Parameter(rng.uniform(-bound, bound, (n_in, 4 * n_hidden)), f"{prefix}.Wx"),
            "Wh": Parameter(rng.uniform(-bound, bound, (n_hidden, 4 * n_hidden)), f"{prefix}.Wh"),
            "b": Parameter(b, f"{prefix}.b")}
