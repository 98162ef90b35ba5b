"""Normalization layers built on region-wise statistics.

The core operation standardizes each mask-induced region of every channel
with that region's own mean and standard deviation, then merges the
regions.  Two trainable variants wrap it:

* the basic variant takes an externally supplied hole mask and applies a
  separate per-channel affine transform to each region;
* the learnable variant detects regions itself by thresholding a spatial
  response map pooled from the features, and modulates the normalized
  output with pixel-wise affine maps convolved from that response.

Full-spatial baselines (instance and batch normalization) and the
mean/variance shift analyzer live here too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ShapeError
from .tensor import (
    Parameter,
    Tensor,
    _accumulate,
    _needs_grad,
    _record,
    as_mask_array,
    channel_avg_pool,
    channel_max_pool,
    concat,
    conv2d,
    sigmoid,
)

DEFAULT_EPS = 1e-5
DEFAULT_THRESHOLD = 0.8


# ---------------------------------------------------------------------------
# Region-wise standardization.


@dataclass
class RegionStats:
    """Per-instance, per-channel, per-region moments from a forward pass.

    ``mu`` and ``sigma`` have shape (N, C, K); ``counts`` has shape (N, K)
    and sums to H*W across regions.  ``sigma`` already includes ``eps``
    inside the square root, so it is always >= sqrt(eps).
    """

    mu: np.ndarray
    sigma: np.ndarray
    counts: np.ndarray
    eps: float


def region_normalize(x: Tensor, mask, eps: float = DEFAULT_EPS) -> tuple[Tensor, RegionStats]:
    """Standardize the two mask regions of each channel independently.

    Pixels with mask 1 form region 1, the rest region 2; each region is
    shifted by its own mean and divided by sqrt(var + eps), then the
    regions are merged back in place.  An empty region contributes
    nothing, leaving the other region normalized alone.  The mask is a
    constant: gradients flow only through ``x``.
    """
    if x.ndim != 4:
        raise ShapeError(f"region_normalize expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    m1 = as_mask_array(mask, n, h, w, x.data.dtype)
    m2 = 1.0 - m1

    out_data = np.zeros_like(x.data)
    inv_sigma = []
    clamped_counts = []
    stats_mu = np.zeros((n, c, 2), dtype=x.data.dtype)
    stats_sigma = np.zeros((n, c, 2), dtype=x.data.dtype)
    stats_counts = np.zeros((n, 2), dtype=np.int64)
    masks = (m1, m2)
    for k, mk in enumerate(masks):
        count = mk.sum(axis=(2, 3), keepdims=True)  # (N, 1, 1, 1)
        clamped = np.maximum(count, 1.0)
        mu = (x.data * mk).sum(axis=(2, 3), keepdims=True) / clamped
        centered = x.data - mu
        var = (centered * centered * mk).sum(axis=(2, 3), keepdims=True) / clamped
        inv = 1.0 / np.sqrt(var + eps)
        out_data += mk * centered * inv
        inv_sigma.append(inv)
        clamped_counts.append(clamped)
        stats_mu[:, :, k] = mu[:, :, 0, 0]
        stats_sigma[:, :, k] = np.sqrt(var + eps)[:, :, 0, 0]
        stats_counts[:, k] = count[:, 0, 0, 0].astype(np.int64)

    stats = RegionStats(mu=stats_mu, sigma=stats_sigma, counts=stats_counts, eps=eps)
    out = Tensor._from_op(out_data, _needs_grad(x), "region_normalize")

    def backward(g):
        # Standard per-group normalization backward, restricted to each
        # region: the output inside region k is exactly that region's
        # standardized value, so `out_data` doubles as x-hat.
        gx = np.zeros_like(g)
        for mk, inv, clamped in zip(masks, inv_sigma, clamped_counts):
            g_sum = (g * mk).sum(axis=(2, 3), keepdims=True)
            gy_sum = (g * out_data * mk).sum(axis=(2, 3), keepdims=True)
            gx += mk * inv * (g - (g_sum + out_data * gy_sum) / clamped)
        _accumulate(x, gx)

    _record(out, backward)
    return out, stats


# ---------------------------------------------------------------------------
# Basic variant: external mask, per-region per-channel affine transform.


@dataclass
class RnBParams:
    """Scale/shift pairs for both regions: each has shape (2, C)."""

    gamma: Tensor
    beta: Tensor

    @classmethod
    def create(cls, channels: int, dtype=None) -> "RnBParams":
        return cls(
            gamma=Parameter(np.ones((2, channels)), dtype=dtype),
            beta=Parameter(np.zeros((2, channels)), dtype=dtype),
        )


def _region_affine(xhat: Tensor, gamma: Tensor, beta: Tensor, m1: np.ndarray) -> Tensor:
    """Apply region k's (gamma_k, beta_k) on region k's pixels."""
    if gamma.shape != beta.shape or gamma.ndim != 2 or gamma.shape[0] != 2:
        raise ShapeError(f"region affine parameters must be (2, C), got {gamma.shape}")
    if gamma.shape[1] != xhat.shape[1]:
        raise ShapeError(
            f"affine parameters cover {gamma.shape[1]} channels, input has {xhat.shape[1]}"
        )
    m2 = 1.0 - m1
    g1 = gamma.data[0][None, :, None, None]
    g2 = gamma.data[1][None, :, None, None]
    b1 = beta.data[0][None, :, None, None]
    b2 = beta.data[1][None, :, None, None]
    scale = m1 * g1 + m2 * g2
    shift = m1 * b1 + m2 * b2
    out = Tensor._from_op(xhat.data * scale + shift, _needs_grad(xhat, gamma, beta), "region_affine")
    xhat_data = xhat.data

    def backward(g):
        if gamma.requires_grad:
            gg = np.stack(
                [
                    (g * xhat_data * m1).sum(axis=(0, 2, 3)),
                    (g * xhat_data * m2).sum(axis=(0, 2, 3)),
                ]
            )
            _accumulate(gamma, gg)
        if beta.requires_grad:
            gb = np.stack([(g * m1).sum(axis=(0, 2, 3)), (g * m2).sum(axis=(0, 2, 3))])
            _accumulate(beta, gb)
        _accumulate(xhat, g * scale)

    _record(out, backward)
    return out


def rn_b_forward(x: Tensor, mask, params: RnBParams, eps: float = DEFAULT_EPS) -> Tensor:
    """Region-normalize under the supplied hole mask, then apply each
    region's own learnable per-channel scale and shift."""
    n, _, h, w = x.shape
    m1 = as_mask_array(mask, n, h, w, x.data.dtype)
    xhat, _ = region_normalize(x, m1, eps=eps)
    return _region_affine(xhat, params.gamma, params.beta, m1)


# ---------------------------------------------------------------------------
# Learnable variant: self-detected regions plus pixel-wise affine maps.


@dataclass
class RnLParams:
    """Three small convolutions and the region-detection threshold.

    ``response_conv`` maps the concatenated channel max/avg pools (2
    channels) to the spatial response; ``gamma_conv`` and ``beta_conv``
    each map the response (1 channel) to a pixel-wise affine map.
    """

    response_w: Tensor
    response_b: Tensor
    gamma_w: Tensor
    gamma_b: Tensor
    beta_w: Tensor
    beta_b: Tensor
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")

    @property
    def kernel_size(self) -> int:
        return self.response_w.shape[-1]

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        kernel_size: int = 3,
        threshold: float = DEFAULT_THRESHOLD,
        dtype=None,
    ) -> "RnLParams":
        # Response weights start small so the response sits near 0.5 (one
        # region under the default threshold); the affine convolutions
        # start as the identity map (gamma 1, beta 0).
        k = kernel_size
        return cls(
            response_w=Parameter(rng.normal(0.0, 0.02, size=(1, 2, k, k)), dtype=dtype),
            response_b=Parameter(np.zeros(1), dtype=dtype),
            gamma_w=Parameter(np.zeros((1, 1, k, k)), dtype=dtype),
            gamma_b=Parameter(np.ones(1), dtype=dtype),
            beta_w=Parameter(np.zeros((1, 1, k, k)), dtype=dtype),
            beta_b=Parameter(np.zeros(1), dtype=dtype),
            threshold=threshold,
        )

    def tensors(self) -> list:
        return [self.response_w, self.response_b, self.gamma_w, self.gamma_b, self.beta_w, self.beta_b]


def spatial_response(x: Tensor, params: RnLParams) -> Tensor:
    """Sigmoid response map from channel max/avg pooling, (N, 1, H, W).

    The two pooled descriptors are concatenated (max first, then average)
    and convolved with padding that preserves the spatial size.
    """
    pooled = concat([channel_max_pool(x), channel_avg_pool(x)], axis=1)
    pad = params.kernel_size // 2
    return sigmoid(conv2d(pooled, params.response_w, params.response_b, stride=1, padding=pad))


def threshold_mask(response, t: float) -> np.ndarray:
    """Binary region mask: 1 where response strictly exceeds ``t``.

    Returns a plain array, so the cut is a stop-gradient by construction;
    the backward pass treats the mask as a constant.
    """
    if not (0.0 < t < 1.0):
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    arr = response.data if isinstance(response, Tensor) else np.asarray(response)
    return (arr > t).astype(arr.dtype)


def rn_l_forward(
    x: Tensor,
    params: RnLParams,
    eps: float = DEFAULT_EPS,
    single_region: bool = False,
) -> tuple[Tensor, dict]:
    """Self-masked region normalization with pixel-wise affine modulation.

    The response map drives both the hard region mask (gradient-blocked)
    and, through two further convolutions, the gamma/beta maps that are
    expanded along the channel axis.  ``single_region`` skips the
    thresholding and normalizes all pixels together (full-spatial
    statistics), for A/B runs where the hard cut is unwanted in training.
    """
    response = spatial_response(x, params)
    if single_region:
        mask = np.ones((x.shape[0], 1, x.shape[2], x.shape[3]), dtype=x.data.dtype)
    else:
        mask = threshold_mask(response, params.threshold)
    xhat, _ = region_normalize(x, mask, eps=eps)
    pad = params.kernel_size // 2
    gamma_map = conv2d(response, params.gamma_w, params.gamma_b, stride=1, padding=pad)
    beta_map = conv2d(response, params.beta_w, params.beta_b, stride=1, padding=pad)
    out = gamma_map * xhat + beta_map
    return out, {"response": response.data, "mask": mask}


# ---------------------------------------------------------------------------
# Full-spatial baselines.


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Per-instance, per-channel standardization over the spatial axes."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects NCHW input, got {x.shape}")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"affine parameters must be ({x.shape[1]},)")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    g_col = gamma.data[None, :, None, None]
    out = Tensor._from_op(xhat * g_col + beta.data[None, :, None, None], _needs_grad(x, gamma, beta), "instance_norm")

    def backward(g):
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gy = g * g_col
            g_mean = gy.mean(axis=(2, 3), keepdims=True)
            gy_mean = (gy * xhat).mean(axis=(2, 3), keepdims=True)
            _accumulate(x, inv * (gy - g_mean - xhat * gy_mean))

    _record(out, backward)
    return out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = DEFAULT_EPS,
    momentum: float = 0.1,
    training: bool = True,
) -> Tensor:
    """Per-channel standardization over batch and spatial axes.

    Training mode uses the current batch's (population) statistics and
    folds them into the running arrays in place; inference mode
    standardizes with the running statistics instead.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW input, got {x.shape}")
    g_col = gamma.data[None, :, None, None]
    if training:
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu[0, :, 0, 0]
        running_var *= 1.0 - momentum
        running_var += momentum * var[0, :, 0, 0]
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv

        out = Tensor._from_op(
            xhat * g_col + beta.data[None, :, None, None], _needs_grad(x, gamma, beta), "batch_norm"
        )

        def backward(g):
            if beta.requires_grad:
                _accumulate(beta, g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gy = g * g_col
                g_mean = gy.mean(axis=(0, 2, 3), keepdims=True)
                gy_mean = (gy * xhat).mean(axis=(0, 2, 3), keepdims=True)
                _accumulate(x, inv * (gy - g_mean - xhat * gy_mean))

        _record(out, backward)
        return out

    inv = (1.0 / np.sqrt(running_var + eps)).astype(x.data.dtype)[None, :, None, None]
    mean = running_mean.astype(x.data.dtype)[None, :, None, None]
    xhat = (x.data - mean) * inv
    out = Tensor._from_op(
        xhat * g_col + beta.data[None, :, None, None], _needs_grad(x, gamma, beta), "batch_norm"
    )

    def backward_eval(g):
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _accumulate(x, g * g_col * inv)

    _record(out, backward_eval)
    return out


# ---------------------------------------------------------------------------
# Layer wrappers with a common (x, mask) call signature.


class RNB(nn.Module):
    """Basic region normalization layer driven by the hole mask."""

    def __init__(self, channels: int, eps: float = DEFAULT_EPS):
        super().__init__()
        params = RnBParams.create(channels)
        self.gamma = params.gamma
        self.beta = params.beta
        self.eps = eps

    def forward(self, x: Tensor, mask=None) -> Tensor:
        if mask is None:
            raise ShapeError("RNB layer requires a region mask")
        return rn_b_forward(x, mask, RnBParams(self.gamma, self.beta), eps=self.eps)


class RNL(nn.Module):
    """Learnable region normalization layer; generates its own mask.

    The response map and generated mask from the latest forward pass are
    kept on ``last_response`` / ``last_mask`` for diagnostics dumps.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        kernel_size: int = 3,
        threshold: float = DEFAULT_THRESHOLD,
        eps: float = DEFAULT_EPS,
        soft_train: bool = False,
    ):
        super().__init__()
        params = RnLParams.create(rng, kernel_size=kernel_size, threshold=threshold)
        self.response_w = params.response_w
        self.response_b = params.response_b
        self.gamma_w = params.gamma_w
        self.gamma_b = params.gamma_b
        self.beta_w = params.beta_w
        self.beta_b = params.beta_b
        self.threshold = threshold
        self.eps = eps
        self.soft_train = soft_train
        self.last_response: np.ndarray | None = None
        self.last_mask: np.ndarray | None = None

    def params(self) -> RnLParams:
        return RnLParams(
            response_w=self.response_w,
            response_b=self.response_b,
            gamma_w=self.gamma_w,
            gamma_b=self.gamma_b,
            beta_w=self.beta_w,
            beta_b=self.beta_b,
            threshold=self.threshold,
        )

    def forward(self, x: Tensor, mask=None) -> Tensor:
        single = self.soft_train and self.training
        out, diag = rn_l_forward(x, self.params(), eps=self.eps, single_region=single)
        self.last_response = diag["response"]
        self.last_mask = diag["mask"]
        return out


class InstanceNorm(nn.Module):
    def __init__(self, channels: int, eps: float = DEFAULT_EPS):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor, mask=None) -> Tensor:
        return instance_norm(x, self.gamma, self.beta, eps=self.eps)


class BatchNorm(nn.Module):
    def __init__(self, channels: int, eps: float = DEFAULT_EPS, momentum: float = 0.1):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float64))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float64))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, mask=None) -> Tensor:
        return batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            eps=self.eps,
            momentum=self.momentum,
            training=self.training,
        )


class NoNorm(nn.Module):
    def forward(self, x: Tensor, mask=None) -> Tensor:
        return x


# ---------------------------------------------------------------------------
# Mean/variance shift analysis.


@dataclass
class ShiftReport:
    """Analytic vs. empirical full-spatial moments of a hole-filled map.

    Filling the mask-0 pixels of a map with a constant shifts the
    full-spatial mean toward that constant and inflates the variance; the
    analytic fields predict the shifted moments from the unmasked region's
    moments alone and must agree with the measured ones exactly.
    """

    mu1: float
    sigma1: float
    mu_3u: float
    sigma_3u: float
    mu_3m: float
    sigma_3m: float
    mu2_analytic: float
    sigma2_analytic: float
    mu2_empirical: float
    sigma2_empirical: float
    fill_value: float
    n: int
    n_m: int
    n_u: int
    degenerate: bool

    @property
    def mean_shift(self) -> float:
        """|mu2 - mu_3u|: how far filling moved the full-spatial mean."""
        return abs(self.mu2_analytic - self.mu_3u)


def shift_report(x, mask, fill_value: float = 255.0) -> ShiftReport:
    """Quantify the moment shift caused by filling holes with a constant.

    ``x`` is a single uncorrupted channel (H x W); the mask marks which of
    its pixels survive (1) and which are replaced by ``fill_value`` (0).
    Computed in float64 regardless of the ambient element type.  When one
    side of the mask is empty the report is flagged degenerate and the
    affected fields take their exact limits.
    """
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"shift_report expects a 2-D channel, got shape {arr.shape}")
    bits = np.asarray(getattr(mask, "bits", mask))
    if bits.shape != arr.shape:
        raise ShapeError(f"mask shape {bits.shape} != channel shape {arr.shape}")

    valid = bits == 1
    n = arr.size
    n_u = int(np.count_nonzero(valid))
    n_m = n - n_u
    fill = float(fill_value)

    mu1 = float(arr.mean())
    sigma1 = float(arr.std())

    if n_u > 0:
        unmasked = arr[valid]
        mu_3u = float(unmasked.mean())
        sigma_3u = float(unmasked.std())
    else:
        mu_3u = float("nan")
        sigma_3u = float("nan")

    filled = np.where(valid, arr, fill)
    mu2_emp = float(filled.mean())
    sigma2_emp = float(filled.std())

    if n_u > 0:
        fu, fm = n_u / n, n_m / n
        mu2 = fu * mu_3u + fm * fill
        sigma2 = float(np.sqrt(fu * sigma_3u**2 + (n_m * n_u / n**2) * (mu_3u - fill) ** 2))
    else:
        mu2, sigma2 = fill, 0.0

    return ShiftReport(
        mu1=mu1,
        sigma1=sigma1,
        mu_3u=mu_3u,
        sigma_3u=sigma_3u,
        mu_3m=fill,
        sigma_3m=0.0,
        mu2_analytic=mu2,
        sigma2_analytic=sigma2,
        mu2_empirical=mu2_emp,
        sigma2_empirical=sigma2_emp,
        fill_value=fill,
        n=n,
        n_m=n_m,
        n_u=n_u,
        degenerate=(n_u == 0 or n_m == 0),
    )
