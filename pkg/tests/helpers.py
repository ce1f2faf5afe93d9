"""Fixtures shared by the network, training and acceptance tests."""
import numpy as np

from gacnn import tensor as T
from gacnn.geometry import PointCloud
from gacnn.network import GacnnConfig, GacnnModel, build_hierarchy, forward_logits
from gacnn.tensor import grad_check, precision
from gacnn.training import cross_entropy_loss

# Softmax over K ignores a bias added to every logit, so this gradient is
# identically zero and its relative error is pure rounding noise.
SHIFT_INVARIANT_SUFFIX = "edge.layer2.bias"


def micro_cloud(seed=0, n=32, num_classes=3, features=2):
    rng = np.random.default_rng(seed)
    return PointCloud(rng.uniform(-3, 3, size=(n, 3)), rng.normal(size=(n, features)),
                      rng.integers(0, num_classes, size=n))


def _keep_activation_scale(model, hierarchy):
    """Move the check point to where activations neither vanish nor explode.

    Near-uniform edge weights shrink every module's output by about 1/K and
    small density weights shrink it further, so at the plain initialisation
    deep gradients fall to the float64 rounding floor of a central
    difference. Scaling each fuse layer by its K and centring density
    weights on 1 keeps gradients well above that floor.
    """
    ks = [hierarchy.enc_graph[t].k for t in range(1, 5)] + [hierarchy.dec_graph[t].k for t in (3, 2, 1, 0)]
    for module, k in zip(model.encoders + model.decoders, ks):
        if module.use_edge:
            module.fuse_mlp.weight.data = module.fuse_mlp.weight.data * k
        module.density.layer2.bias.data = np.ones_like(module.density.layer2.bias.data)


def network_grad_error(flags, seed=0, max_entries=6, step=1e-6):
    """Worst relative finite-difference error over a micro network's parameters.

    Returns ``(error, worst_invariant_gradient)``: the second value is the
    largest analytic gradient seen on the shift-invariant biases.
    """
    use_global, use_edge, use_density = flags
    config = GacnnConfig.micro(use_global=use_global, use_edge=use_edge, use_density=use_density)
    cloud = micro_cloud(seed)
    with precision(np.float64):
        model = GacnnModel.init(config, seed=seed).astype(np.float64)
        rng = np.random.default_rng(seed + 1)
        for p in model.parameters():
            if p.ndim == 1:  # offset biases from zero, away from ReLU kinks
                p.data = rng.uniform(0.05, 0.2, size=p.shape)
        hierarchy = build_hierarchy(config, cloud.coords)
        _keep_activation_scale(model, hierarchy)

        def loss():
            return cross_entropy_loss(forward_logits(model, cloud, hierarchy), cloud.labels)

        named = model.named_parameters()
        checked = [p for name, p in named.items() if not name.endswith(SHIFT_INVARIANT_SUFFIX)]
        invariant = [p for name, p in named.items() if name.endswith(SHIFT_INVARIANT_SUFFIX)]
        err = grad_check(loss, checked, step=step, max_entries=max_entries, rng=rng)
        with T.Tape() as tape:
            value = loss()
        grads = T.backward(tape, value, invariant)
        flat = max((float(np.abs(grads[p]).max()) for p in invariant), default=0.0)
    return err, flat
