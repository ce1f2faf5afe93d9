import copy
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from gacnn import tensor as T
from gacnn.attention import (
    DensityAttentionParams,
    EdgeAttentionParams,
    GacModuleParams,
    GlobalAttentionParams,
    density_attention,
    edge_attention,
    edge_features,
    gac_forward,
    global_attention,
    normalized_distances,
    normalized_inverse_density,
    pairwise_differences,
)
from gacnn.errors import ConfigurationError, ContractError, DimensionError
from gacnn.geometry import DensityField, KnnGraph, PointCloud, kde_density, knn_graph
from gacnn.tensor import Affine, Tensor, grad_check, precision


def _zero_affine(fan_in, fan_out, bias=0.0):
    return Affine(Tensor(np.zeros((fan_in, fan_out))), Tensor(np.full(fan_out, bias)))


def _setup(seed, n=12, k=4, c=2, dims=(4, 6, 5), dtype=np.float32, **flags):
    rng = np.random.default_rng(seed)
    with precision(dtype):
        cloud = PointCloud(rng.uniform(-2, 2, size=(n, 3)), rng.normal(size=(n, c)))
        graph = knn_graph(cloud, k)
        density = kde_density(cloud, graph)
        params = GacModuleParams.init(c, dims, rng, **flags)
        # non-zero biases keep ReLUs away from their kinks at the origin
        for _, p in params.named_parameters():
            if p.ndim == 1:
                p.data = (rng.uniform(0.05, 0.3, size=p.shape)).astype(dtype)
    return cloud, graph, density, params


# -- edge attention ----------------------------------------------------------

def test_edge_features_subtraction():
    cloud = PointCloud([(1, 2, 3), (0, 2, 3)])
    e = edge_features(cloud, KnnGraph(np.array([[1], [0]])))
    np.testing.assert_array_equal(e[0, 0], [1, 0, 0])
    np.testing.assert_array_equal(e[1, 0], [-1, 0, 0])


def test_edge_features_duplicate_points_give_zero():
    cloud = PointCloud([(4, 4, 4), (4, 4, 4)])
    np.testing.assert_array_equal(edge_features(cloud, KnnGraph(np.array([[1], [0]]))), 0)


def test_edge_features_collinear_rows():
    cloud = PointCloud([(0, 0, 0), (1, 0, 0), (3, 0, 0)])
    e = edge_features(cloud, knn_graph(cloud, 2))
    # rows: 0 -> [1, 2], 1 -> [0, 2], 2 -> [1, 0]
    np.testing.assert_array_equal(e[:, :, 0], [[-1, -3], [1, -2], [2, 3]])


def test_edge_features_rejects_foreign_graph():
    with pytest.raises(ContractError):
        edge_features(PointCloud([(0, 0, 0), (1, 0, 0)]), KnnGraph(np.array([[2], [0]])))


def test_edge_attention_zero_params_uniform():
    params = EdgeAttentionParams(_zero_affine(3, 4), _zero_affine(4, 5))
    w = edge_attention(params, np.random.default_rng(0).normal(size=(6, 8, 3))).data
    np.testing.assert_allclose(w, 1 / 8, atol=1e-7)


def test_edge_attention_single_neighbor_is_one():
    params = EdgeAttentionParams(Affine.init(3, 4, np.random.default_rng(0)),
                                 Affine.init(4, 2, np.random.default_rng(1)))
    w = edge_attention(params, np.random.default_rng(2).normal(size=(5, 1, 3))).data
    np.testing.assert_array_equal(w, 1.0)


def test_edge_attention_hand_computed():
    # layer 1 passes x through a ReLU, layer 2 sums x and y into one logit
    l1 = Affine(Tensor(np.eye(3)), Tensor(np.zeros(3)))
    l2 = Affine(Tensor([[1.0], [1.0], [0.0]]), Tensor([0.0]))
    edges = np.array([[[1.0, 0.0, 9.0], [2.0, 1.0, 0.0], [-4.0, 0.5, 0.0]]])
    w = edge_attention(EdgeAttentionParams(l1, l2), edges).data[0, :, 0]
    np.testing.assert_allclose(w, oracles.softmax([1.0, 3.0, 0.5]), atol=1e-6)


def test_edge_attention_shape_error():
    params = EdgeAttentionParams(_zero_affine(3, 4), _zero_affine(4, 5))
    with pytest.raises(DimensionError):
        edge_attention(params, np.zeros((4, 3)))


# -- density attention -------------------------------------------------------

def test_normalized_inverse_density_example():
    dn = normalized_inverse_density(DensityField(np.array([1.0, 0.2, 0.4]), 1.0), KnnGraph(np.array([[1, 2]] * 3)))
    np.testing.assert_allclose(dn[0], [1.0, 0.5])


def test_normalized_inverse_density_uniform():
    dn = normalized_inverse_density(DensityField(np.full(5, 0.3), 1.0), KnnGraph(np.array([[1, 2, 3]] * 5)))
    np.testing.assert_array_equal(dn, 1.0)


def test_normalized_inverse_density_rejects_zero():
    with pytest.raises(ContractError):
        normalized_inverse_density(DensityField(np.array([0.0, 1.0]), 1.0), KnnGraph(np.array([[1], [0]])))


def test_density_attention_constant_map():
    params = DensityAttentionParams(_zero_affine(1, 4), _zero_affine(4, 1, bias=0.7))
    d = density_attention(params, DensityField(np.array([0.1, 0.5, 2.0]), 1.0),
                          KnnGraph(np.array([[1, 2], [0, 2], [0, 1]])))
    assert d.shape == (3, 2, 1)
    np.testing.assert_allclose(d.data, 0.7, rtol=1e-6)


# -- global attention --------------------------------------------------------

def test_pairwise_differences_zero_diagonal():
    d = pairwise_differences(np.random.default_rng(0).normal(size=(7, 3)))
    np.testing.assert_array_equal(d[np.arange(7), np.arange(7)], 0)


def test_global_attention_single_point():
    layer = Affine(Tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]), Tensor([0.5, -0.5]))
    g = global_attention(GlobalAttentionParams(layer), np.array([[3.0, -1.0, 2.0]]))
    np.testing.assert_allclose(g.data[0, 0], [9.5, 11.5])


def test_global_attention_two_points():
    pts = np.array([(0.0, 0.0, 0.0), (1.0, 2.0, 3.0)])
    d = pairwise_differences(pts)
    np.testing.assert_array_equal(d[0, 1], [-1, -2, -3])
    np.testing.assert_array_equal(d[1, 0], [1, 2, 3])
    s = normalized_distances(pts).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(s[0, :, 2], oracles.softmax([0.0, -3.0]), atol=1e-6)


# -- normalisation invariants ------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40), st.integers(1, 10))
def test_attention_normalisations(seed, n, k):
    k = min(k, n - 1)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-20, 20, size=(n, 3))
    graph = knn_graph(pts, k)
    edge = EdgeAttentionParams(Affine.init(3, 5, rng), Affine.init(5, 3, rng))
    np.testing.assert_allclose(edge_attention(edge, edge_features(pts, graph)).data.sum(axis=1), 1, atol=1e-6)
    np.testing.assert_allclose(normalized_distances(pts).data.sum(axis=1), 1, atol=1e-6)
    dn = normalized_inverse_density(kde_density(pts, graph), graph)
    assert np.all(dn > 0) and np.all(dn <= 1)
    np.testing.assert_array_equal(dn.max(axis=1), 1.0)


# -- the assembled module ----------------------------------------------------

def test_gac_degenerate_pipeline():
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(2, 3)), rng.normal(size=(2, 2)))
    graph = KnnGraph(np.array([[1], [0]]))
    params = GacModuleParams.init(2, (3, 4, 4), rng, use_global=False, use_edge=False, use_density=False)
    params.out_mlp = Affine(Tensor(np.eye(4)), Tensor(np.zeros(4)))
    out = gac_forward(params, cloud, graph).data
    rows = np.hstack([cloud.coords, cloud.features])[[1, 0]]
    expected = np.maximum(rows @ params.fuse_mlp.weight.data + params.fuse_mlp.bias.data, 0)
    np.testing.assert_allclose(out, expected, rtol=1e-6, atol=1e-6)


def test_gac_uniform_edge_weights_scale_by_one_over_k():
    cloud, graph, density, on = _setup(1, k=4, use_global=False, use_density=False)
    on.edge = EdgeAttentionParams(_zero_affine(3, 4), _zero_affine(4, 6))
    on.out_mlp = Affine(Tensor(np.eye(6)[:, :5]), Tensor(np.zeros(5)))
    off = copy.deepcopy(on)
    off.use_edge = False
    trace = {}
    gac_forward(off, cloud, graph, trace=trace)
    expected = (trace["fused"].data / 4)[..., :5].max(axis=1)
    np.testing.assert_allclose(gac_forward(on, cloud, graph).data, expected, rtol=1e-6)


def test_gac_shape_contract():
    cloud, graph, density, params = _setup(2, n=32, k=8, c=2, dims=(4, 8, 16))
    assert gac_forward(params, cloud, graph, density).shape == (32, 16)


def test_gac_density_surgery_matches_flag_off():
    cloud, graph, density, on = _setup(3)
    on.density = DensityAttentionParams(_zero_affine(1, 4), _zero_affine(4, 1, bias=1.0))
    off = copy.deepcopy(on)
    off.use_density = False
    np.testing.assert_allclose(gac_forward(on, cloud, graph, density).data,
                               gac_forward(off, cloud, graph, density).data, rtol=1e-6)


def test_gac_global_surgery_matches_flag_off():
    cloud, graph, density, on = _setup(4, c=2, dims=(4, 6, 5))
    on.neighbor_mlp = _zero_affine(5, 4)
    off = copy.deepcopy(on)
    off.use_global, off.global_attn, off.neighbor_mlp = False, None, None
    off.fuse_mlp = Affine(Tensor(on.fuse_mlp.weight.data[:5]), Tensor(on.fuse_mlp.bias.data))
    np.testing.assert_allclose(gac_forward(on, cloud, graph, density).data,
                               gac_forward(off, cloud, graph, density).data, rtol=1e-6)


def test_gac_flag_width_mismatch_is_configuration_error():
    cloud, graph, density, params = _setup(5, use_global=False)
    params.use_global = True
    with pytest.raises(ConfigurationError):
        gac_forward(params, cloud, graph, density)


def test_gac_density_flag_needs_density():
    cloud, graph, _, params = _setup(6)
    with pytest.raises(ConfigurationError):
        gac_forward(params, cloud, graph, None)


def test_gac_trace_records_maps():
    cloud, graph, density, params = _setup(7, n=10, k=3)
    trace = {}
    gac_forward(params, cloud, graph, density, trace=trace)
    assert trace["global_weights"].shape == (10, 10, 4)
    assert trace["edge_weights"].shape == (10, 3, 6)
    assert trace["density_weights"].shape == (10, 3, 1)
    assert trace["output"].shape == (10, 5)


@pytest.mark.parametrize("flags", list(itertools.product([False, True], repeat=3)),
                         ids=lambda f: "g{}e{}d{}".format(*map(int, f)))
def test_gac_gradients_match_finite_differences(flags):
    use_global, use_edge, use_density = flags
    with precision(np.float64):
        cloud, graph, density, params = _setup(8, n=10, k=3, dtype=np.float64, use_global=use_global,
                                               use_edge=use_edge, use_density=use_density)
        probe = np.random.default_rng(9).normal(size=(10, 5))
        feats = Tensor(cloud.features, requires_grad=True)

        def loss():
            out = gac_forward(params, cloud, graph, density, features=feats)
            return T.sum(T.mul(out, probe))

        named = dict(params.named_parameters())
        # the last edge bias shifts every logit of a softmax slice equally
        invariant = named.pop("edge.layer2.bias")
        err = grad_check(loss, list(named.values()) + [feats], step=1e-6)
        with T.Tape() as tape:
            out = loss()
        flat = T.backward(tape, out, [invariant])[invariant]
        noise = grad_check(loss, [invariant], step=1e-6)
    assert err < 1e-4
    assert np.abs(flat).max() < 1e-12
    assert noise <= 1.0  # both sides are rounding noise around zero


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_gac_permutation_equivariance(seed):
    cloud, graph, density, params = _setup(seed, n=16, k=4)
    perm = np.random.default_rng(seed).permutation(16)
    pc = cloud.subset(perm)
    pg = knn_graph(pc, 4)
    pd = kde_density(pc, pg)
    out = gac_forward(params, cloud, graph, density).data
    out_p = gac_forward(params, pc, pg, pd).data
    np.testing.assert_allclose(out_p, out[perm], rtol=1e-4, atol=1e-5)
