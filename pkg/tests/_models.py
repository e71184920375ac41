"""Shared builders for tests."""
import numpy as np
import torch

from ted4.config import ModelConfig
from ted4.model import TedModel

SMALL = dict(feat_dim=8, tfeat_dim=4, bank_dim=4, n_offsets=3, n_frames=6, pe_bands=2, hyper_hidden=8,
             ar_hidden=8, deform_hidden=8, decoder_hidden=8)


def random_model(seed, prior="hyperprior", temporal=True, n_points=40):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(prior=prior, temporal_activation=temporal, voxel_size=0.25, **SMALL)
    model = TedModel.from_points(rng.uniform(-1, 1, size=(n_points, 3)), cfg, seed=seed)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.nets.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=g))
        a = model.anchors
        a.feat.normal_(0, 1, generator=g)
        a.tfeat.normal_(0, 1, generator=g)
        a.offsets.normal_(0, 0.3, generator=g)
        a.scaling.uniform_(0.05, 0.3, generator=g)
        a.tau[:, 0].uniform_(0, 0.5, generator=g)
        a.offset_logit.normal_(0, 2, generator=g)
        a.temporal_logit.normal_(0, 2, generator=g)
    model.dynamic_phase = True
    return model
