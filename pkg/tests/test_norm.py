import numpy as np
import numpy.testing as npt
import pytest

from regionnorm.errors import ShapeError
from regionnorm.gradcheck import check_gradients, random_tensor
from regionnorm.masks import RegionMask
from regionnorm.norm import (
    RNB,
    RNL,
    BatchNorm,
    InstanceNorm,
    NoNorm,
    RnBParams,
    RnLParams,
    batch_norm,
    instance_norm,
    region_normalize,
    rn_b_forward,
    rn_l_forward,
    shift_report,
    spatial_response,
    threshold_mask,
)
from regionnorm.tensor import Parameter, Tensor, sum_

EPS = 1e-5


def two_region_mask(h, w, rng):
    bits = (rng.random((h, w)) > 0.5).astype(np.uint8)
    bits[0, 0], bits[-1, -1] = 1, 0  # keep both regions nonempty
    return bits


# ---------------------------------------------------------------------------
# region_normalize core


def test_all_ones_mask_degenerates_to_instance_norm(f64):
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 8, 8)))
    out, _ = region_normalize(x, np.ones((8, 8)), eps=EPS)
    gamma = Tensor(np.ones(3))
    beta = Tensor(np.zeros(3))
    reference = instance_norm(x, gamma, beta, eps=EPS)
    npt.assert_allclose(out.data, reference.data, atol=1e-6)


def test_constant_regions_normalize_to_zero(f64):
    x = Tensor(np.array([[0.0, 0.0], [10.0, 10.0]]).reshape(1, 1, 2, 2))
    mask = np.array([[1, 1], [0, 0]], dtype=np.uint8)
    out, stats = region_normalize(x, mask, eps=EPS)
    npt.assert_allclose(out.data, np.zeros((1, 1, 2, 2)), atol=1e-12)
    npt.assert_allclose(stats.mu[0, 0], [0.0, 10.0])


def test_region_output_moments(f64):
    rng = np.random.default_rng(1)
    x_data = rng.normal(0.0, 2.0, size=(2, 4, 12, 12))
    bits = two_region_mask(12, 12, rng)
    out, stats = region_normalize(Tensor(x_data), bits, eps=EPS)
    for n in range(2):
        for c in range(4):
            for k, region in enumerate((bits == 1, bits == 0)):
                values = out.data[n, c][region]
                sigma_sq = stats.sigma[n, c, k] ** 2 - EPS  # population variance
                npt.assert_allclose(values.mean(), 0.0, atol=1e-6)
                npt.assert_allclose(values.var(), sigma_sq / (sigma_sq + EPS), atol=1e-5)


def test_region_stats_counts_partition_pixels(f64):
    rng = np.random.default_rng(2)
    bits = two_region_mask(6, 6, rng)
    _, stats = region_normalize(Tensor(rng.normal(size=(3, 2, 6, 6))), bits, eps=EPS)
    npt.assert_array_equal(stats.counts.sum(axis=1), np.full(3, 36))
    assert np.all(stats.sigma >= np.sqrt(EPS) - 1e-12)


def test_empty_region_normalizes_other_alone(f64):
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(1, 2, 4, 4)))
    out_all, _ = region_normalize(x, np.ones((4, 4)), eps=EPS)
    gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
    npt.assert_allclose(out_all.data, instance_norm(x, gamma, beta, eps=EPS).data, atol=1e-6)
    out_none, stats = region_normalize(x, np.zeros((4, 4)), eps=EPS)
    npt.assert_allclose(out_none.data, out_all.data, atol=1e-6)
    assert stats.counts[0, 0] == 0


def test_single_pixel_region_maps_to_zero(f64):
    x = Tensor(np.array([[3.0, 1.0], [1.0, 1.0]]).reshape(1, 1, 2, 2))
    mask = np.array([[1, 0], [0, 0]], dtype=np.uint8)
    out, _ = region_normalize(x, mask, eps=EPS)
    assert out.data[0, 0, 0, 0] == 0.0


def test_region_normalize_gradient(f64):
    rng = np.random.default_rng(4)
    x = random_tensor(rng, (2, 3, 6, 6))
    bits = two_region_mask(6, 6, rng)
    weights = Tensor(rng.normal(size=(2, 3, 6, 6)))  # random readout direction

    def f(x):
        out, _ = region_normalize(x, bits, eps=EPS)
        return sum_(out * weights)

    check_gradients(f, [x])


def test_region_normalize_shape_mismatch():
    with pytest.raises(ShapeError):
        region_normalize(Tensor(np.zeros((1, 1, 4, 4))), np.ones((3, 3)))


def test_region_normalize_accepts_region_mask_object(f64):
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(1, 1, 4, 4)))
    bits = two_region_mask(4, 4, rng)
    out_a, _ = region_normalize(x, RegionMask.from_bits(bits), eps=EPS)
    out_b, _ = region_normalize(x, bits, eps=EPS)
    npt.assert_array_equal(out_a.data, out_b.data)


# ---------------------------------------------------------------------------
# basic variant


def test_rn_b_identity_affine_matches_core(f64):
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)))
    bits = two_region_mask(6, 6, rng)
    params = RnBParams.create(3)
    out = rn_b_forward(x, bits, params, eps=EPS)
    core, _ = region_normalize(x, bits, eps=EPS)
    npt.assert_allclose(out.data, core.data, atol=1e-12)


def test_rn_b_constant_region_takes_beta(f64):
    x = Tensor(np.full((1, 2, 4, 4), 7.0))
    bits = np.zeros((4, 4), dtype=np.uint8)
    bits[:2] = 1
    params = RnBParams.create(2)
    params.gamma.data[0, :] = 2.0
    params.beta.data[0, :] = 3.0
    out = rn_b_forward(x, bits, params, eps=EPS)
    npt.assert_allclose(out.data[:, :, :2, :], np.full((1, 2, 2, 4), 3.0), atol=1e-12)
    npt.assert_allclose(out.data[:, :, 2:, :], np.zeros((1, 2, 2, 4)), atol=1e-12)


def test_rn_b_gradients(f64):
    rng = np.random.default_rng(7)
    x = random_tensor(rng, (1, 2, 6, 6))
    bits = two_region_mask(6, 6, rng)
    gamma = Tensor(rng.normal(1.0, 0.3, size=(2, 2)), requires_grad=True)
    beta = Tensor(rng.normal(0.0, 0.3, size=(2, 2)), requires_grad=True)
    weights = Tensor(rng.normal(size=(1, 2, 6, 6)))

    def f(x, gamma, beta):
        out = rn_b_forward(x, bits, RnBParams(gamma, beta), eps=EPS)
        return sum_(out * weights)

    check_gradients(f, [x, gamma, beta])


def test_region_decoupling_is_exact():
    # corrupted-pixel perturbations must not change uncorrupted outputs at all
    rng = np.random.default_rng(8)
    for _ in range(20):
        bits = two_region_mask(8, 8, rng)
        params = RnBParams.create(3)
        params.gamma.data[:] = rng.normal(1.0, 0.2, size=(2, 3))
        params.beta.data[:] = rng.normal(0.0, 0.2, size=(2, 3))
        x = rng.normal(size=(1, 3, 8, 8))
        perturbed = x.copy()
        perturbed[:, :, bits == 0] = rng.normal(size=perturbed[:, :, bits == 0].shape)
        out_a = rn_b_forward(Tensor(x), bits, params).data
        out_b = rn_b_forward(Tensor(perturbed), bits, params).data
        assert np.array_equal(out_a[:, :, bits == 1], out_b[:, :, bits == 1])
        # and vice versa: uncorrupted edits leave corrupted outputs unchanged
        perturbed2 = x.copy()
        perturbed2[:, :, bits == 1] = rng.normal(size=perturbed2[:, :, bits == 1].shape)
        out_c = rn_b_forward(Tensor(perturbed2), bits, params).data
        assert np.array_equal(out_a[:, :, bits == 0], out_c[:, :, bits == 0])


# ---------------------------------------------------------------------------
# learnable variant


def test_spatial_response_constant_bias(f64):
    params = RnLParams.create(np.random.default_rng(0))
    params.response_w.data[:] = 0.0
    params.response_b.data[:] = 0.7
    x = Tensor(np.zeros((1, 4, 6, 6)))
    response = spatial_response(x, params)
    npt.assert_allclose(response.data, np.full((1, 1, 6, 6), 1.0 / (1.0 + np.exp(-0.7))), rtol=1e-7)


def test_spatial_response_in_open_unit_interval(f64):
    rng = np.random.default_rng(9)
    params = RnLParams.create(rng)
    params.response_w.data[:] = rng.normal(0, 2.0, size=params.response_w.shape)
    response = spatial_response(Tensor(rng.normal(size=(2, 5, 8, 8))), params)
    assert np.all(response.data > 0.0) and np.all(response.data < 1.0)


def test_spatial_response_single_channel_degeneracy(f64):
    # with C=1 the max and avg pools coincide, so the response only sees
    # that shared map through the summed kernel slices
    rng = np.random.default_rng(10)
    params = RnLParams.create(rng)
    x = Tensor(rng.normal(size=(1, 1, 6, 6)))
    merged = RnLParams.create(rng)
    merged.response_w.data[:] = 0.0
    merged.response_w.data[0, 0] = params.response_w.data[0, 0] + params.response_w.data[0, 1]
    merged.response_b.data[:] = params.response_b.data
    a = spatial_response(x, params)
    b = spatial_response(x, merged)
    npt.assert_allclose(a.data, b.data, rtol=1e-10)


def test_threshold_mask_example():
    response = np.array([[0.9, 0.5], [0.81, 0.79]]).reshape(1, 1, 2, 2)
    npt.assert_array_equal(
        threshold_mask(response, 0.8)[0, 0], np.array([[1, 0], [1, 0]], dtype=response.dtype)
    )


def test_threshold_boundary_is_strict():
    response = np.full((1, 1, 3, 3), 0.8)
    assert threshold_mask(response, 0.8).sum() == 0


def test_threshold_tiny_t_selects_everything():
    rng = np.random.default_rng(11)
    response = rng.uniform(0.01, 0.99, size=(1, 1, 4, 4))
    assert threshold_mask(response, 1e-9).sum() == 16


def test_threshold_validation():
    with pytest.raises(ValueError):
        threshold_mask(np.zeros((1, 1, 2, 2)), 1.5)


def test_rn_l_identity_affine_matches_core(f64):
    # gamma conv starts as the constant-1 map and beta as 0, so the output
    # at init equals plain region normalization under the generated mask
    rng = np.random.default_rng(12)
    params = RnLParams.create(rng)
    x = Tensor(rng.normal(size=(2, 4, 8, 8)))
    out, diag = rn_l_forward(x, params, eps=EPS)
    core, _ = region_normalize(x, diag["mask"], eps=EPS)
    npt.assert_allclose(out.data, core.data, atol=1e-6)


def test_rn_l_uniform_response_above_t_single_region(f64):
    rng = np.random.default_rng(13)
    params = RnLParams.create(rng, threshold=0.2)
    params.response_w.data[:] = 0.0
    params.response_b.data[:] = 3.0  # response sigmoid(3) ~ 0.95 everywhere
    x = Tensor(rng.normal(size=(1, 3, 6, 6)))
    out, diag = rn_l_forward(x, params, eps=EPS)
    assert diag["mask"].sum() == 36
    gamma_map = 1.0 / (1.0 + np.exp(-3.0)) * params.gamma_w.data.sum() + params.gamma_b.data
    core, _ = region_normalize(x, np.ones((6, 6)), eps=EPS)
    npt.assert_allclose(out.data, core.data * gamma_map + params.beta_b.data, atol=1e-6)


def test_rn_l_single_region_mode(f64):
    rng = np.random.default_rng(14)
    params = RnLParams.create(rng)
    x = Tensor(rng.normal(size=(1, 3, 6, 6)))
    out, diag = rn_l_forward(x, params, eps=EPS, single_region=True)
    assert diag["mask"].sum() == 36
    core, _ = region_normalize(x, np.ones((6, 6)), eps=EPS)
    npt.assert_allclose(out.data, core.data, atol=1e-6)


def _stable_rnl_case(seed, shape=(1, 3, 6, 6), margin=2e-3):
    """Input/params whose response map stays clear of the threshold, so the
    mask is locally constant under finite-difference probes."""
    rng = np.random.default_rng(seed)
    params = RnLParams.create(rng, threshold=0.5)
    params.response_w.data[:] = rng.normal(0.0, 3.0, size=params.response_w.shape)
    params.gamma_w.data[:] = rng.normal(0.0, 0.1, size=params.gamma_w.shape)
    params.beta_w.data[:] = rng.normal(0.0, 0.1, size=params.beta_w.shape)
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    response = spatial_response(x, params)
    if np.min(np.abs(response.data - params.threshold)) <= margin:
        return None
    mask = threshold_mask(response, params.threshold)
    if mask.sum() in (0, mask.size):  # want both regions active
        return None
    return x, params


def test_rn_l_gradients_with_mask_stability_guard(f64):
    rng = np.random.default_rng(15)
    checked = 0
    seed = 0
    while checked < 3:
        case = _stable_rnl_case(seed)
        seed += 1
        if case is None:
            continue
        x, params = case
        weights = Tensor(rng.normal(size=x.shape))

        def f(x, rw, rb, gw, gb, bw, bb):
            p = RnLParams(rw, rb, gw, gb, bw, bb, threshold=params.threshold)
            out, _ = rn_l_forward(x, p, eps=EPS)
            return sum_(out * weights)

        check_gradients(f, [x, *params.tensors()])
        checked += 1


def test_rn_l_mask_stop_gradient_literal(f64):
    # a probe small enough not to flip any mask bit must see gradients that
    # match the analytic backward (the mask is a constant of the backward)
    case = _stable_rnl_case(3)
    assert case is not None
    x, params = case
    out, diag = rn_l_forward(x, params, eps=EPS)
    loss = sum_(out)
    loss.backward()
    analytic = x.grad.copy()

    h = 1e-7  # far below the 2e-3 response margin
    flat = x.data.reshape(-1)
    idx = 7
    from regionnorm.tensor import no_grad

    with no_grad():
        original = flat[idx]
        flat[idx] = original + h
        out_p, diag_p = rn_l_forward(x, params, eps=EPS)
        flat[idx] = original - h
        out_m, diag_m = rn_l_forward(x, params, eps=EPS)
        flat[idx] = original
    assert np.array_equal(diag_p["mask"], diag["mask"])
    assert np.array_equal(diag_m["mask"], diag["mask"])
    numeric = (out_p.data.sum() - out_m.data.sum()) / (2 * h)
    npt.assert_allclose(analytic.reshape(-1)[idx], numeric, rtol=1e-5)


# ---------------------------------------------------------------------------
# baselines


def test_instance_norm_constant_input_returns_beta(f64):
    x = Tensor(np.full((2, 3, 4, 4), 5.0))
    gamma = Tensor(np.full(3, 2.0))
    beta = Tensor(np.array([0.5, -1.0, 2.0]))
    out = instance_norm(x, gamma, beta, eps=EPS)
    for c, b in enumerate([0.5, -1.0, 2.0]):
        npt.assert_allclose(out.data[:, c], np.full((2, 4, 4), b), atol=1e-12)


def test_instance_norm_gradients(f64):
    rng = np.random.default_rng(16)
    x = random_tensor(rng, (2, 3, 5, 5))
    gamma = Tensor(rng.normal(1.0, 0.2, size=3), requires_grad=True)
    beta = Tensor(rng.normal(size=3), requires_grad=True)
    weights = Tensor(rng.normal(size=(2, 3, 5, 5)))
    check_gradients(
        lambda x, g, b: sum_(instance_norm(x, g, b, eps=EPS) * weights), [x, gamma, beta]
    )


def test_batch_norm_train_mode_zero_mean(f64):
    rng = np.random.default_rng(17)
    layer = BatchNorm(4)
    out = layer(Tensor(rng.normal(3.0, 2.0, size=(6, 4, 5, 5))))
    npt.assert_allclose(out.data.mean(axis=(0, 2, 3)), np.zeros(4), atol=1e-6)


def test_batch_norm_running_stats_drive_eval(f64):
    rng = np.random.default_rng(18)
    layer = BatchNorm(2, momentum=0.5)
    x = Tensor(rng.normal(1.0, 2.0, size=(8, 2, 6, 6)))
    layer(x)
    layer.eval()
    y = layer(x)
    expected = (x.data - layer.running_mean[None, :, None, None]) / np.sqrt(
        layer.running_var[None, :, None, None] + layer.eps
    )
    npt.assert_allclose(y.data, expected, rtol=1e-6)


def test_batch_norm_gradients(f64):
    rng = np.random.default_rng(19)
    x = random_tensor(rng, (3, 2, 4, 4))
    gamma = Tensor(rng.normal(1.0, 0.2, size=2), requires_grad=True)
    beta = Tensor(rng.normal(size=2), requires_grad=True)
    rm, rv = np.zeros(2), np.ones(2)
    weights = Tensor(rng.normal(size=(3, 2, 4, 4)))

    def f(x, g, b):
        return sum_(batch_norm(x, g, b, rm, rv, eps=EPS, training=True) * weights)

    check_gradients(f, [x, gamma, beta])


def test_layer_wrappers_smoke(f64):
    rng = np.random.default_rng(20)
    x = Tensor(rng.normal(size=(2, 4, 8, 8)))
    bits = two_region_mask(8, 8, rng)
    for layer in (RNB(4), RNL(rng), InstanceNorm(4), BatchNorm(4), NoNorm()):
        out = layer(x, bits)
        assert out.shape == x.shape
    with pytest.raises(ShapeError):
        RNB(4)(x, None)


def test_rnl_layer_init_matches_plain_normalization(f64):
    rng = np.random.default_rng(21)
    layer = RNL(rng)
    x = Tensor(rng.normal(size=(2, 4, 8, 8)))
    out = layer(x)
    core, _ = region_normalize(x, layer.last_mask, eps=layer.eps)
    npt.assert_allclose(out.data, core.data, atol=1e-6)


# ---------------------------------------------------------------------------
# shift analysis


def test_shift_report_worked_example():
    # 2x2 map, one masked pixel, unmasked pixels {0, 0, 0}, fill 255
    x = np.zeros((2, 2))
    mask = np.array([[1, 1], [1, 0]], dtype=np.uint8)
    report = shift_report(x, mask, fill_value=255.0)
    npt.assert_allclose(report.mu2_analytic, 63.75, rtol=1e-12)
    npt.assert_allclose(report.sigma2_analytic**2, 12192.1875, rtol=1e-12)
    npt.assert_allclose(report.sigma2_analytic, 110.42, atol=5e-3)
    npt.assert_allclose(report.mu2_empirical, 63.75, rtol=1e-12)
    npt.assert_allclose(report.sigma2_empirical**2, 12192.1875, rtol=1e-12)
    assert (report.n, report.n_m, report.n_u) == (4, 1, 3)
    assert not report.degenerate


def test_shift_report_no_mask_no_shift():
    rng = np.random.default_rng(22)
    x = rng.uniform(0, 255, (6, 6))
    report = shift_report(x, np.ones((6, 6), dtype=np.uint8), fill_value=255.0)
    npt.assert_allclose(report.mu2_analytic, report.mu_3u, rtol=1e-12)
    npt.assert_allclose(report.sigma2_analytic, report.sigma_3u, rtol=1e-12)
    assert report.degenerate  # one side empty is flagged


def test_shift_report_fill_at_mean_is_fixed_point():
    rng = np.random.default_rng(23)
    x = rng.uniform(0, 255, (8, 8))
    mask = (rng.random((8, 8)) > 0.4).astype(np.uint8)
    mask[0, 0], mask[1, 1] = 1, 0
    mu_u = x[mask == 1].mean()
    report = shift_report(x, mask, fill_value=mu_u)
    npt.assert_allclose(report.mu2_analytic, report.mu_3u, rtol=1e-12)


def test_shift_report_analytic_matches_empirical_randomized():
    rng = np.random.default_rng(24)
    for _ in range(200):
        h, w = int(rng.integers(2, 12)), int(rng.integers(2, 12))
        x = rng.uniform(-100, 300, (h, w))
        mask = (rng.random((h, w)) > rng.uniform(0.2, 0.8)).astype(np.uint8)
        fill = float(rng.uniform(-100, 300))
        report = shift_report(x, mask, fill_value=fill)
        if report.n_u == 0:
            continue
        assert abs(report.mu2_analytic - report.mu2_empirical) < 1e-9
        assert abs(report.sigma2_analytic - report.sigma2_empirical) < 1e-9


def test_shift_monotone_in_mask_ratio():
    # fixed unmasked statistics, growing hole: |mu2 - mu_3u| strictly rises
    base = np.tile(np.array([10.0, 30.0, 50.0, 70.0, 90.0]), 200)[:1000].reshape(10, 100)
    shifts = []
    for ratio in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6):
        n_m = int(round(ratio * base.size))
        mask = np.ones(base.size, dtype=np.uint8)
        mask[:n_m] = 0
        mask = mask.reshape(base.shape)
        # keep the unmasked multiset identical by construction: the base
        # pattern repeats every 5 pixels, so any aligned cut preserves stats
        report = shift_report(base, mask, fill_value=255.0)
        shifts.append(report.mean_shift)
    assert all(a < b for a, b in zip(shifts, shifts[1:]))


def test_shift_report_all_masked_degenerate():
    report = shift_report(np.ones((4, 4)), np.zeros((4, 4), dtype=np.uint8), fill_value=255.0)
    assert report.degenerate
    assert np.isnan(report.mu_3u)
    npt.assert_allclose(report.mu2_analytic, 255.0)
    npt.assert_allclose(report.sigma2_analytic, 0.0)
    npt.assert_allclose(report.mu2_empirical, 255.0)


def test_shift_report_shape_guards():
    with pytest.raises(ShapeError):
        shift_report(np.zeros((2, 2, 2)), np.ones((2, 2)))
    with pytest.raises(ShapeError):
        shift_report(np.zeros((2, 2)), np.ones((3, 3)))
