"""Shared fixtures: the Gaussian-mixture denoiser oracle experiment."""

import numpy as np
import pytest

import cvla.numerics as nx
from cvla.diffusion import NoiseSchedule, ddpm_loss
from cvla.nnblocks import LinearLayer, step_embedding
from cvla.trainer import AdamW, TrainConfig

GMM_MODES = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
GMM_STD = 0.2
GMM_X0_CLIP = 1.45  # max |mode coordinate| + 3 sigma


def sample_gmm(stream, n):
    """Draw n points from the fixed 4-mode mixture."""
    comps = stream.integers(n, 0, 4)
    return (GMM_MODES[comps] + GMM_STD * stream.normal((n, 2))).astype(np.float32)


class MixtureDenoiser:
    """MLP noise predictor over 2-D points with a step embedding."""

    def __init__(self, stream, hidden=192, K=100, emb_dims=32):
        self.K = K
        self.emb_dims = emb_dims
        self.fc0 = LinearLayer.create(stream, "fc0", hidden, 2 + emb_dims)
        self.fc1 = LinearLayer.create(stream, "fc1", hidden, hidden)
        self.fc2 = LinearLayer.create(stream, "fc2", hidden, hidden)
        self.fc3 = LinearLayer.create(stream, "fc3", 2, hidden)

    def params(self):
        out = {}
        for i, l in enumerate([self.fc0, self.fc1, self.fc2, self.fc3]):
            out.update(l.named_params(f"fc{i}"))
        return out

    def __call__(self, noisy, k, context):
        n = noisy.shape[0]
        ks = np.broadcast_to(np.asarray(k), (n,))
        emb = step_embedding(ks, self.emb_dims)
        h = nx.concat([noisy, emb], axis=-1)
        h = nx.gelu(self.fc0.apply(h))
        h = nx.gelu(self.fc1.apply(h))
        h = nx.gelu(self.fc2.apply(h))
        return self.fc3.apply(h)


def train_mixture_denoiser(steps=8000, batch=512, seed=3, lr_drops=(5000, 6500)):
    """Train the oracle denoiser; returns (schedule, denoiser)."""
    schedule = NoiseSchedule(100)
    stream = nx.RngStream(seed)
    den = MixtureDenoiser(stream.derive("init"))
    params = den.params()
    for p in params.values():
        p.requires_grad = True
    opt = AdamW(params, TrainConfig(steps=steps, batch_size=batch, weight_decay=0.0), lr_override=1e-3)
    data_stream = stream.derive("data")
    noise_stream = stream.derive("noise")
    for i in range(steps):
        if i in lr_drops:
            opt.lr_override *= 0.1
        x0 = nx.tensor(sample_gmm(data_stream, batch))
        with nx.GradRecord() as rec:
            loss = ddpm_loss(schedule, den, x0, None, noise_stream)
            rec.backward(loss)
        opt.step()
        opt.zero_grads()
    return schedule, den


def mode_coverage(samples):
    """Fraction of samples within 3 sigma of a mode, plus per-mode hit flags."""
    d = np.linalg.norm(samples[:, None, :] - GMM_MODES[None, :, :], axis=-1)
    nearest = d.argmin(axis=1)
    within = d.min(axis=1) <= 3 * GMM_STD
    hits = [bool(np.any(within & (nearest == m))) for m in range(4)]
    return float(within.mean()), hits


@pytest.fixture(scope="session")
def gmm_denoiser():
    return train_mixture_denoiser()
