"""Entropy models for anchor attributes.

* :class:`HyperpriorNet` maps a positionally-encoded anchor position to a
  Gaussian (mean, scale) per attribute component plus one quantization step
  per attribute type.
* :class:`ChannelARNet` refines the feature distribution chunk by chunk,
  conditioning on already-decoded chunks.
* :class:`FactorizedPrior` is the position-agnostic baseline.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

PROB_FLOOR = 1e-12
SIGMA_FLOOR = 1e-6

ATTRIBUTES = ("feat", "offsets", "scaling", "tfeat", "tau")
BASE_STEP = {"feat": 0.1, "offsets": 0.02, "scaling": 0.002, "tfeat": 0.1, "tau": 0.01}


def attribute_dims(feat_dim, n_offsets, tfeat_dim):
    return {"feat": feat_dim, "offsets": 3 * n_offsets, "scaling": 3, "tfeat": tfeat_dim, "tau": 4}


def positional_encoding(x, n_bands):
    x = torch.as_tensor(x)
    parts = [x]
    for k in range(n_bands):
        w = (2.0 ** k) * math.pi
        parts += [torch.sin(w * x), torch.cos(w * x)]
    return torch.cat(parts, -1)


def round_half_away(v):
    return torch.sign(v) * torch.floor(torch.abs(v) + 0.5)


def quantize(a, q, mode="hard", generator=None):
    a = torch.as_tensor(a)
    q = torch.as_tensor(q, dtype=a.dtype)
    if mode == "hard":
        return q * round_half_away(a / q)
    if mode == "noise":
        u = torch.rand(a.shape, generator=generator, dtype=a.dtype) - 0.5
        return a + q * u
    raise ValueError(f"unknown quantization mode {mode!r}")


def likelihood(a_hat, mu, sigma, q, floor=PROB_FLOOR):
    """Gaussian mass of the width-``q`` bin centred on ``a_hat``.

    Evaluated on the lower tail (via |a_hat - mu|) so far-out bins keep their
    precision.
    """
    d = torch.abs(torch.as_tensor(a_hat) - mu)
    upper = torch.special.ndtr((0.5 * q - d) / sigma)
    lower = torch.special.ndtr((-0.5 * q - d) / sigma)
    return torch.clamp(upper - lower, min=floor)


def rate_bits(probs):
    return -torch.log2(probs).sum()


class HyperpriorNet(nn.Module):
    def __init__(self, dims: dict, n_bands=8, hidden=64, base_step=None):
        super().__init__()
        self.dims = dict(dims)
        self.n_bands = n_bands
        self.base_step = dict(BASE_STEP if base_step is None else base_step)
        self.trunk = nn.Sequential(
            nn.Linear(3 + 6 * n_bands, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
        )
        self.heads = nn.ModuleDict({k: nn.Linear(hidden, 2 * d + 1) for k, d in self.dims.items()})

    def forward(self, x_norm):
        h = self.trunk(positional_encoding(x_norm, self.n_bands))
        out = {}
        for name, head in self.heads.items():
            d = self.dims[name]
            raw = head(h)
            mu = raw[..., :d]
            sigma = torch.clamp(F.softplus(raw[..., d:2 * d]), min=SIGMA_FLOOR)
            q = self.base_step[name] * torch.exp(4.0 * torch.tanh(raw[..., 2 * d:] / 4.0))
            out[name] = (mu, sigma, q)
        return out


def hyperprior_params(net: HyperpriorNet, x_norm, attribute):
    if attribute not in net.dims:
        raise KeyError(f"unknown attribute type {attribute!r}")
    return net(x_norm)[attribute]


class ChannelARNet(nn.Module):
    """Chunk k sees the hyperprior output for ``f`` and chunks 0..k-1."""

    def __init__(self, feat_dim, n_chunks=4, hidden=64):
        super().__init__()
        if feat_dim % n_chunks:
            raise ValueError("feat_dim must be divisible by n_chunks")
        self.feat_dim, self.n_chunks = feat_dim, n_chunks
        self.chunk = feat_dim // n_chunks
        self.nets = nn.ModuleList()
        for k in range(n_chunks):
            net = nn.Sequential(nn.Linear(2 * feat_dim + k * self.chunk, hidden), nn.ReLU(),
                                nn.Linear(hidden, 2 * self.chunk))
            nn.init.zeros_(net[-1].weight)
            nn.init.zeros_(net[-1].bias)
            self.nets.append(net)

    def chunk_slice(self, k):
        return slice(k * self.chunk, (k + 1) * self.chunk)

    def forward_chunk(self, hyper_mu, hyper_sigma, decoded, k):
        if not 0 <= k < self.n_chunks:
            raise IndexError(f"chunk index {k} out of range [0, {self.n_chunks})")
        ctx = decoded[..., : k * self.chunk]
        inp = torch.cat([hyper_mu, torch.log(hyper_sigma), ctx], -1)
        out = self.nets[k](inp)
        sl = self.chunk_slice(k)
        mu = hyper_mu[..., sl] + out[..., : self.chunk]
        sigma = torch.clamp(hyper_sigma[..., sl] * torch.exp(out[..., self.chunk:]), min=SIGMA_FLOOR)
        return mu, sigma

    def forward(self, hyper_mu, hyper_sigma, feat_hat):
        """Teacher-forced parameters for all chunks at once."""
        mus, sigmas = zip(*(self.forward_chunk(hyper_mu, hyper_sigma, feat_hat, k) for k in range(self.n_chunks)))
        return torch.cat(mus, -1), torch.cat(sigmas, -1)


def channel_ar_params(net: ChannelARNet, hyper_mu, hyper_sigma, decoded_chunks, k):
    return net.forward_chunk(hyper_mu, hyper_sigma, decoded_chunks, k)


class FactorizedPrior(nn.Module):
    """Per-channel learned univariate CDF (monotone network on the real line)."""

    def __init__(self, channels, filters=(3, 3, 3), init_scale=10.0):
        super().__init__()
        self.channels = channels
        sizes = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1 / (len(sizes) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(sizes) - 1):
            init = math.log(math.expm1(1 / scale / sizes[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, sizes[i + 1], sizes[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, sizes[i + 1], 1) - 0.5))
            if i < len(sizes) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, sizes[i + 1], 1)))

    def logits_cumulative(self, x):
        # x: (C, 1, M)
        h = x
        for i in range(len(self.matrices)):
            h = F.softplus(self.matrices[i]) @ h + self.biases[i]
            if i < len(self.factors):
                h = h + torch.tanh(self.factors[i]) * torch.tanh(h)
        return h

    def cdf(self, x):
        """CDF for values of shape (M, C)."""
        return torch.sigmoid(self.logits_cumulative(x.T[:, None, :]))[:, 0, :].T

    def likelihood(self, a_hat, q, floor=PROB_FLOOR):
        x = a_hat.T[:, None, :]
        q = torch.as_tensor(q, dtype=a_hat.dtype)
        lower = self.logits_cumulative(x - 0.5 * q)
        upper = self.logits_cumulative(x + 0.5 * q)
        sign = -torch.sign(lower + upper).detach()
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return torch.clamp(p[:, 0, :].T, min=floor)


class FactorizedEntropy(nn.Module):
    """Factorized priors for all attribute types plus one learned step each."""

    def __init__(self, dims: dict, base_step=None):
        super().__init__()
        base = dict(BASE_STEP if base_step is None else base_step)
        self.dims = dict(dims)
        self.priors = nn.ModuleDict({k: FactorizedPrior(d) for k, d in self.dims.items()})
        self.log_step = nn.ParameterDict({k: nn.Parameter(torch.tensor([math.log(base[k])])) for k in self.dims})

    def step(self, name):
        return torch.exp(self.log_step[name])


def gaussian_bin_probs(mu, sigma, q, indices):
    """Numpy bin masses for integer ``indices`` (float64, shared by the coder
    and the hard-mode rate estimate)."""
    from scipy.special import ndtr

    mu, sigma, q = (np.asarray(v, dtype=np.float64)[..., None] for v in (mu, sigma, q))
    d = np.abs(indices * q - mu)
    return ndtr((0.5 * q - d) / sigma) - ndtr((-0.5 * q - d) / sigma)
