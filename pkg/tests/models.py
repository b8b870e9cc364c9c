"""Model builders and comparisons shared by the test modules."""
import numpy as np

from deepreg.cascade import CascadeModel
from deepreg.data_io import synthetic_layout
from deepreg.features import HogConfig, LocalDescriptorConfig

SMALL_HOG = HogConfig(resize_to=16, block_size=16, block_stride=8, cell_size=8)


def random_model(P=3, T=2, p=0.5, seed=0, hog=SMALL_HOG, scale=0.05, cfgs=None, **kw):
    rng = np.random.default_rng(seed)
    cfgs = cfgs or [LocalDescriptorConfig(16)] * T
    model = CascadeModel.zeros(synthetic_layout(P), hog, cfgs, p, **kw)
    for a in model.params():
        a[...] = scale * rng.normal(size=a.shape)
    if model.has_global:
        model.b0 += 32.0
    return model


def same_bits(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def models_equal(a: CascadeModel, b: CascadeModel) -> bool:
    """Field-by-field equality, bitwise on every float."""
    return (a.layout == b.layout and a.hog_cfg == b.hog_cfg and a.local_cfgs == b.local_cfgs
            and same_bits(a.dropout_rate, b.dropout_rate)
            and same_bits(a.W0, b.W0) and same_bits(a.b0, b.b0) and same_bits(a.mean_shape, b.mean_shape)
            and all(same_bits(x.W, y.W) and same_bits(x.b, y.b) for x, y in zip(a.stages, b.stages))
            and a.T == b.T)
